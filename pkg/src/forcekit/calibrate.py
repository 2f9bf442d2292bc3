"""Energy calibration for force-trained models.

A model trained on forces alone outputs a pseudo-energy Phi that tracks the
true energy only up to scale and offset. Starting from one known energy,
``taylor_energy_series`` integrates the model gradient along a trajectory
to estimate the energy of every frame; ``fit_linear`` then maps Phi onto
those estimates with ordinary least squares.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .autodiff import DTYPE
from .chem import Conformation, Trajectory
from .errors import DegenerateFit, MissingInitialEnergy, TooShort
from .model import EquivariantTransformer, predict_energy

DEFAULT_SAMPLES = 8


@dataclass(frozen=True)
class CalibrationModel:
    w: float
    b: float  # eV
    fit_residual_mae: float = 0.0  # eV

    def __post_init__(self):
        if not math.isfinite(self.w) or not math.isfinite(self.b):
            raise ValueError("calibration coefficients must be finite")

    def apply(self, phi):
        """``w * phi + b`` for a scalar or array of pseudo-energies."""
        if np.ndim(phi) == 0:
            return self.w * float(phi) + self.b
        return self.w * np.asarray(phi, dtype=np.float64) + self.b

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "CalibrationModel":
        d = json.loads(text)
        return cls(float(d["w"]), float(d["b"]), float(d.get("fit_residual_mae", 0.0)))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "CalibrationModel":
        return cls.from_json(Path(path).read_text())


Provider = Callable[[np.ndarray], tuple[float, np.ndarray]]


def _energies_and_gradients(traj: Trajectory, model, chunk: int = 256):
    """Phi and dPhi/dr for every frame of ``traj``."""
    if isinstance(model, EquivariantTransformer):
        species = torch.tensor(traj.species[None], dtype=torch.long)
        allpos = traj.positions()
        es, gs = [], []
        for lo in range(0, len(allpos), chunk):
            pos = torch.tensor(allpos[lo : lo + chunk], dtype=DTYPE, requires_grad=True)
            e, f = model.energy_and_forces(pos, species.expand(len(pos), -1))
            es.append(e.detach().numpy())
            gs.append(-f.detach().numpy())
        return np.concatenate(es), np.concatenate(gs)
    out = [model(f.positions) for f in traj]
    return np.array([e for e, _ in out]), np.stack([-f for _, f in out])


def taylor_energy_series(
    traj: Trajectory,
    model: EquivariantTransformer | Provider,
    e0: float | None = None,
    taylor_sign: int = 1,
) -> np.ndarray:
    """First-order line integral of the model gradient along ``traj``.

    ``E_t = E_{t-1} + sign * <dPhi/dr(r_{t-1}), r_t - r_{t-1}>`` with
    ``E_0`` taken from ``e0`` or the first frame's ``ref_energy``. ``model``
    is either a network or a provider returning ``(energy, forces)``.
    ``taylor_sign=-1`` gives the subtracting variant of the update.
    """
    if len(traj) < 2:
        raise TooShort("energy integration needs at least 2 frames")
    if taylor_sign not in (1, -1):
        raise ValueError("taylor_sign must be +1 or -1")
    if e0 is None:
        e0 = traj[0].ref_energy
    if e0 is None:
        raise MissingInitialEnergy("first frame has no ref_energy and no e0 was given")
    _, grads = _energies_and_gradients(traj, model)
    pos = traj.positions()
    steps = np.einsum("tij,tij->t", grads[:-1], np.diff(pos, axis=0))
    return float(e0) + np.concatenate([[0.0], taylor_sign * np.cumsum(steps)])


def sample_indices(n_frames: int, m: int = DEFAULT_SAMPLES) -> np.ndarray:
    """``m + 1`` frame indices ``0 = t_0 < ... < t_m = n - 1`` at uniform stride."""
    if n_frames < 2:
        raise TooShort("need at least 2 frames to sample")
    k = min(m + 1, n_frames)
    return np.unique(np.round(np.linspace(0, n_frames - 1, k)).astype(np.int64))


def fit_linear(phi: Sequence[float], energies: Sequence[float], m: int | None = None) -> CalibrationModel:
    """Least-squares ``w, b`` with ``w * phi + b ~ energies``.

    If ``m`` is given, only ``m + 1`` uniformly strided samples are used.
    """
    phi = np.asarray(phi, dtype=np.float64).reshape(-1)
    e = np.asarray(energies, dtype=np.float64).reshape(-1)
    if phi.shape != e.shape:
        raise ValueError(f"{len(phi)} pseudo-energies but {len(e)} energies")
    if m is not None:
        idx = sample_indices(len(phi), m)
        phi, e = phi[idx], e[idx]
    if len(phi) < 2:
        raise DegenerateFit("need at least 2 samples")
    dphi = phi - phi.mean()
    var = float(np.dot(dphi, dphi))
    if var <= 1e-300 or np.ptp(phi) <= 1e-15 * max(1.0, float(np.max(np.abs(phi)))):
        raise DegenerateFit("pseudo-energy is constant over the samples")
    w = float(np.dot(dphi, e - e.mean()) / var)
    b = float(e.mean() - w * phi.mean())
    resid = float(np.mean(np.abs(w * phi + b - e)))
    return CalibrationModel(w, b, resid)


def calibrate_trajectory(
    traj: Trajectory,
    model: EquivariantTransformer,
    m: int = DEFAULT_SAMPLES,
    e0: float | None = None,
    taylor_sign: int = 1,
) -> CalibrationModel:
    """Integrate energies along ``traj`` and fit on ``m + 1`` sampled frames."""
    estimates = taylor_energy_series(traj, model, e0, taylor_sign)
    idx = sample_indices(len(traj), m)
    phi = np.array([predict_energy(traj[int(k)], model) for k in idx])
    return fit_linear(phi, estimates[idx])


def calibrated_energy(c: Conformation, model: EquivariantTransformer, cal: CalibrationModel) -> float:
    return cal.apply(predict_energy(c, model))
