"""Velocity Verlet integration with an optional single Nose-Hoover thermostat."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .chem import ELEMENTS, FORCE_TO_ACCEL, KB, Conformation, Trajectory
from .errors import SimulationDiverged

# (positions (n, 3)) -> (energy eV, forces (n, 3) eV/A)
ForceProvider = Callable[[np.ndarray], "tuple[float, np.ndarray]"]

MAX_COORD = 1e4  # A
MAX_SPEED = 1e2  # A/fs


@dataclass(frozen=True)
class SimConfig:
    temperature: float = 300.0
    timestep: float = 0.5
    n_steps: int = 0
    thermostat: str = "nose_hoover"
    tau: float | None = None  # fs; defaults to 100 * timestep
    seed: int = 0
    snapshot_every: int = 1

    def __post_init__(self):
        if not self.timestep > 0:
            raise ValueError("timestep must be positive")
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")
        if self.n_steps < 0:
            raise ValueError("n_steps must be non-negative")
        if self.snapshot_every < 1:
            raise ValueError("snapshot_every must be >= 1")
        if self.thermostat not in ("none", "nose_hoover"):
            raise ValueError(f"unknown thermostat {self.thermostat!r}")
        if self.thermostat == "nose_hoover" and self.temperature == 0:
            raise ValueError("Nose-Hoover needs a positive target temperature")

    @property
    def tau_fs(self) -> float:
        return 100.0 * self.timestep if self.tau is None else self.tau


@dataclass(frozen=True, eq=False)
class SimState:
    positions: np.ndarray  # A
    velocities: np.ndarray  # A/fs
    masses: np.ndarray  # amu
    zeta: float = 0.0  # 1/fs
    step: int = 0
    energy: float = 0.0  # potential energy at ``positions``
    forces: np.ndarray | None = None

    @property
    def n_dof(self) -> int:
        return max(3 * len(self.masses) - 3, 1)

    def kinetic_energy(self) -> float:
        return kinetic_energy(self.velocities, self.masses)

    def temperature(self) -> float:
        return 2.0 * self.kinetic_energy() / (self.n_dof * KB)


def kinetic_energy(velocities, masses) -> float:
    """Kinetic energy in eV for velocities in A/fs and masses in amu."""
    return 0.5 * float(np.sum(masses[:, None] * velocities * velocities)) / FORCE_TO_ACCEL


def maxwell_boltzmann_init(c: Conformation, temperature: float, seed: int, masses=None) -> np.ndarray:
    """Velocities (A/fs) drawn at ``temperature`` with zero total momentum."""
    masses = ELEMENTS.masses(c.species) if masses is None else np.asarray(masses, dtype=np.float64)
    if temperature < 0:
        raise ValueError("temperature must be non-negative")
    n = c.n_atoms
    if temperature == 0:
        return np.zeros((n, 3))
    rng = np.random.default_rng(seed)
    sd = np.sqrt(KB * temperature * FORCE_TO_ACCEL / masses)
    v = rng.standard_normal((n, 3)) * sd[:, None]
    p = masses @ v
    v -= p / masses.sum()
    return v


def init_state(c: Conformation, provider: ForceProvider, cfg: SimConfig, masses=None, velocities=None) -> SimState:
    masses = ELEMENTS.masses(c.species) if masses is None else np.asarray(masses, dtype=np.float64)
    if velocities is None:
        velocities = maxwell_boltzmann_init(c, cfg.temperature, cfg.seed, masses)
    pos = np.array(c.positions)
    energy, forces = provider(pos)
    return SimState(pos, np.array(velocities, dtype=np.float64), masses, 0.0, 0, float(energy), np.asarray(forces))


def _thermostat_half(v, masses, zeta, dt, kt, n_dof, q):
    # symmetric quarter/half/quarter splitting of dv/dt = -zeta v, dzeta/dt = (2K - Nf kT)/Q
    two_ke = float(np.sum(masses[:, None] * v * v)) / FORCE_TO_ACCEL
    zeta += 0.25 * dt * (two_ke - n_dof * kt) / q
    v = v * math.exp(-0.5 * dt * zeta)
    two_ke = float(np.sum(masses[:, None] * v * v)) / FORCE_TO_ACCEL
    zeta += 0.25 * dt * (two_ke - n_dof * kt) / q
    return v, zeta


def verlet_step(state: SimState, provider: ForceProvider, cfg: SimConfig) -> SimState:
    dt = cfg.timestep
    masses = state.masses
    inv_m = FORCE_TO_ACCEL / masses[:, None]
    v = state.velocities
    zeta = state.zeta
    nose = cfg.thermostat == "nose_hoover"
    if nose:
        kt = KB * cfg.temperature
        q = state.n_dof * kt * cfg.tau_fs**2
        v, zeta = _thermostat_half(v, masses, zeta, dt, kt, state.n_dof, q)
    v = v + 0.5 * dt * state.forces * inv_m
    pos = state.positions + dt * v
    step = state.step + 1
    _guard(pos, v, step)
    energy, forces = provider(pos)
    forces = np.asarray(forces)
    v = v + 0.5 * dt * forces * inv_m
    if nose:
        v, zeta = _thermostat_half(v, masses, zeta, dt, kt, state.n_dof, q)
    _guard(pos, v, step)
    if not (math.isfinite(energy) and np.all(np.isfinite(forces))):
        raise SimulationDiverged(f"non-finite energy/forces at step {step}", step)
    return SimState(pos, v, masses, zeta, step, float(energy), forces)


def _guard(pos, v, step):
    if not np.all(np.isfinite(pos)) or np.max(np.abs(pos)) > MAX_COORD:
        raise SimulationDiverged(f"positions diverged at step {step}", step)
    if not np.all(np.isfinite(v)) or np.max(np.einsum("ij,ij->i", v, v)) > MAX_SPEED**2:
        raise SimulationDiverged(f"velocities diverged at step {step}", step)


def _frame(state: SimState, species, extra=None) -> Conformation:
    ke = state.kinetic_energy()
    info = {
        "step": state.step,
        "kinetic_energy": ke,
        "temperature": 2.0 * ke / (state.n_dof * KB),
    }
    if extra:
        info.update(extra)
    return Conformation(state.positions, species, state.energy, state.forces, info)


def simulate(
    c0: Conformation,
    provider: ForceProvider,
    cfg: SimConfig,
    masses=None,
    velocities=None,
    calibration=None,
) -> Trajectory:
    """Run ``cfg.n_steps`` steps, recording frame 0 and every ``snapshot_every``-th step.

    Frames carry the provider's energy/forces as labels. When ``calibration``
    (a ``CalibrationModel``) is given, each frame also stores
    ``calibrated_energy`` in its info mapping.

    Raises ``SimulationDiverged`` with ``partial`` set to the frames recorded
    so far when the divergence guard trips.
    """
    tag = getattr(provider, "source_tag", "custom")
    state = init_state(c0, provider, cfg, masses, velocities)
    species = c0.species

    def extra(s):
        if calibration is None:
            return None
        return {"calibrated_energy": calibration.apply(s.energy)}

    frames = [_frame(state, species, extra(state))]
    for _ in range(cfg.n_steps):
        try:
            state = verlet_step(state, provider, cfg)
        except SimulationDiverged as err:
            partial = Trajectory(frames, cfg.timestep, tag)
            raise SimulationDiverged(str(err), err.step, partial) from None
        if state.step % cfg.snapshot_every == 0:
            frames.append(_frame(state, species, extra(state)))
    return Trajectory(frames, cfg.timestep, tag)


def run(state: SimState, provider: ForceProvider, cfg: SimConfig, n_steps: int, callback=None) -> SimState:
    """Advance ``state`` by ``n_steps`` without recording frames."""
    for _ in range(n_steps):
        state = verlet_step(state, provider, cfg)
        if callback is not None:
            callback(state)
    return state


class SignFlipped:
    """Wraps a provider and negates its forces; a deliberately unstable field."""

    def __init__(self, provider: ForceProvider):
        self.provider = provider
        self.source_tag = "flipped-" + getattr(provider, "source_tag", "custom")

    def __call__(self, positions):
        e, f = self.provider(positions)
        return -e, -np.asarray(f)
