"""Force accuracy metrics and trajectory-collapse statistics."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass

import numpy as np

from .chem import Conformation, Trajectory, interatomic_distance_matrix
from .errors import ShapeMismatch, TooShort

LOG_GUARD = 1e-12  # A, keeps log(S_0 = 0) finite
DEFAULT_WINDOW = 200


def _pair(pred, ref):
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise ShapeMismatch(f"prediction shape {pred.shape} != reference shape {ref.shape}")
    return pred, ref


def force_mae(pred, ref) -> float:
    """Mean absolute error over every force component."""
    pred, ref = _pair(pred, ref)
    return float(np.mean(np.abs(pred - ref)))


def cosine_distance(pred, ref) -> float:
    """Mean over atoms of ``1 - cos(angle(pred_i, ref_i))``.

    Atoms where either vector is (numerically) zero contribute 0.
    """
    pred, ref = _pair(pred, ref)
    pred = pred.reshape(-1, 3)
    ref = ref.reshape(-1, 3)
    dot = np.einsum("ij,ij->i", pred, ref)
    norms = np.linalg.norm(pred, axis=1) * np.linalg.norm(ref, axis=1)
    ok = norms >= 1e-12
    dist = np.zeros(len(pred))
    dist[ok] = 1.0 - np.clip(dot[ok] / norms[ok], -1.0, 1.0)
    return float(np.mean(dist)) if len(dist) else 0.0


def rmsd(c_t, c_0) -> float:
    """Root mean squared displacement, no superposition."""
    a = c_t.positions if isinstance(c_t, Conformation) else np.asarray(c_t, dtype=np.float64)
    b = c_0.positions if isinstance(c_0, Conformation) else np.asarray(c_0, dtype=np.float64)
    if isinstance(c_t, Conformation) and isinstance(c_0, Conformation):
        if not np.array_equal(c_t.species, c_0.species):
            raise ShapeMismatch("frames have different species")
    if a.shape != b.shape:
        raise ShapeMismatch(f"shape {a.shape} != {b.shape}")
    return float(np.sqrt(np.mean(np.sum((a - b) ** 2, axis=-1))))


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.corrcoef(a, b)[0, 1])


@dataclass(frozen=True, eq=False)
class StabilityReport:
    s_series: np.ndarray  # max |D_t - D_0| per frame, A
    s_star: np.ndarray  # running max of log S
    increments: np.ndarray  # 1 where s_star strictly increased
    r_series: np.ndarray  # windowed mean of increments
    p: int
    collapse_frame: int | None = None
    collapse_step: int | None = None  # MD step of collapse_frame when frames carry it

    @property
    def collapsed(self) -> bool:
        return self.collapse_frame is not None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["frame", "s", "s_star", "r"])
        for k, (s, ss, r) in enumerate(zip(self.s_series, self.s_star, self.r_series)):
            w.writerow([k, repr(float(s)), repr(float(ss)), repr(float(r))])
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "n_frames": int(len(self.s_series)),
            "p": self.p,
            "collapsed": self.collapsed,
            "collapse_frame": self.collapse_frame,
            "collapse_step": self.collapse_step,
            "max_s": float(np.max(self.s_series)),
            "final_r": float(self.r_series[-1]),
        }

    def summary_json(self) -> str:
        return json.dumps(self.summary(), sort_keys=True)


def s_series(traj: Trajectory) -> np.ndarray:
    d0 = interatomic_distance_matrix(traj[0])
    return np.array([np.max(np.abs(interatomic_distance_matrix(f) - d0)) for f in traj])


def collapse_statistics(s: np.ndarray, p: int):
    """Running max of log S, increment indicators and windowed rate.

    ``r_t`` is the number of increments among the most recent ``p`` frames
    (fewer near the start) divided by ``p``.
    """
    if p < 1:
        raise ValueError("window p must be >= 1")
    s = np.asarray(s, dtype=np.float64)
    logs = np.log(np.maximum(s, LOG_GUARD))
    s_star = np.maximum.accumulate(logs)
    inc = np.zeros(len(s), dtype=np.int64)
    inc[1:] = (np.diff(s_star) > 0).astype(np.int64)
    csum = np.concatenate([[0], np.cumsum(inc)])
    t = np.arange(len(s))
    lo = np.maximum(t + 1 - p, 0)
    r = (csum[t + 1] - csum[lo]) / p
    return s_star, inc, r


def detect_collapse(r: np.ndarray, p: int) -> int | None:
    """Earliest T with r_t == 1 for all t >= T and at least p frames from T on."""
    r = np.asarray(r)
    if not len(r) or r[-1] != 1.0:
        return None
    not_one = np.flatnonzero(r != 1.0)
    start = int(not_one[-1]) + 1 if len(not_one) else 0
    if len(r) - start < p:
        return None
    return start


def stability_series(traj: Trajectory, p: int = DEFAULT_WINDOW) -> StabilityReport:
    if len(traj) < 2:
        raise TooShort("stability analysis needs at least 2 frames")
    s = s_series(traj)
    s_star, inc, r = collapse_statistics(s, p)
    frame = detect_collapse(r, p)
    step = None
    if frame is not None:
        step = int(traj[frame].info.get("step", frame))
    return StabilityReport(s, s_star, inc, r, p, frame, step)


def energy_drift(total_energy, window: float = 0.1) -> float:
    """Secular drift of a conserved-energy series, relative to its mean magnitude.

    Compares the mean over the first and last ``window`` fraction of the
    series, which averages out the bounded oscillation that velocity Verlet
    shows around its shadow Hamiltonian.
    """
    e = np.asarray(total_energy, dtype=np.float64)
    k = max(int(math.ceil(window * len(e))), 1)
    scale = float(np.mean(np.abs(e)))
    if scale == 0:
        return 0.0
    return float(abs(np.mean(e[-k:]) - np.mean(e[:k])) / scale)
