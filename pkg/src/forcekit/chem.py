"""Molecular value types, the element table and the unit system.

Units are fixed globally: positions in Angstrom, time in fs, energy in eV,
mass in amu and temperature in K. All arrays are float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping, Sequence

import numpy as np

from .errors import InconsistentSpecies, EmptyTrajectory, NonFiniteCoordinate, ShapeMismatch


@dataclass(frozen=True)
class UnitSystem:
    k_b: float = 8.617333262e-5  # eV/K
    # (eV/A)/amu expressed in A/fs^2
    force_to_accel: float = 9.64853e-3


UNITS = UnitSystem()
KB = UNITS.k_b
FORCE_TO_ACCEL = UNITS.force_to_accel


@dataclass(frozen=True)
class AtomSpec:
    symbol: str
    element_id: int
    mass: float

    def __post_init__(self):
        if not self.mass > 0:
            raise ValueError(f"mass of {self.symbol} must be positive, got {self.mass}")
        if self.element_id < 0:
            raise ValueError("element_id must be non-negative")


class ElementTable:
    """Immutable symbol <-> id <-> mass lookup.

    ``extend`` returns a new table; ids of existing elements never change.
    """

    def __init__(self, entries: Sequence[tuple[str, float]]):
        atoms = tuple(AtomSpec(sym, i, float(m)) for i, (sym, m) in enumerate(entries))
        if len({a.symbol for a in atoms}) != len(atoms):
            raise ValueError("duplicate element symbol")
        self._atoms = atoms
        self._by_symbol = MappingProxyType({a.symbol: a for a in atoms})
        self._masses = np.array([a.mass for a in atoms])
        self._masses.setflags(write=False)

    def __len__(self):
        return len(self._atoms)

    def __iter__(self):
        return iter(self._atoms)

    def __repr__(self):
        return f"ElementTable({[(a.symbol, a.mass) for a in self._atoms]})"

    def extend(self, symbol: str, mass: float) -> "ElementTable":
        return ElementTable([(a.symbol, a.mass) for a in self._atoms] + [(symbol, mass)])

    def id_of(self, symbol: str) -> int:
        try:
            return self._by_symbol[symbol].element_id
        except KeyError:
            raise KeyError(f"unknown element symbol {symbol!r}") from None

    def symbol_of(self, element_id: int) -> str:
        return self._atoms[element_id].symbol

    def masses(self, species) -> np.ndarray:
        return self._masses[np.asarray(species, dtype=np.int64)]


ELEMENTS = ElementTable([("H", 1.008), ("C", 12.011), ("O", 15.999)])


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Conformation:
    """One snapshot: positions (n, 3), species ids (n,), optional labels.

    ``info`` carries extra per-frame scalars (step, temperature, calibrated
    energy, ...) that travel with the frame through extended-XYZ files.
    """

    positions: np.ndarray
    species: np.ndarray
    ref_energy: float | None = None
    ref_forces: np.ndarray | None = None
    info: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        pos = np.array(self.positions, dtype=np.float64)
        spc = np.array(self.species, dtype=np.int64).reshape(-1)
        object.__setattr__(self, "positions", _frozen(pos))
        object.__setattr__(self, "species", _frozen(spc))
        if self.ref_forces is not None:
            object.__setattr__(self, "ref_forces", _frozen(np.array(self.ref_forces, dtype=np.float64)))
        if self.ref_energy is not None:
            object.__setattr__(self, "ref_energy", float(self.ref_energy))
        object.__setattr__(self, "info", MappingProxyType(dict(self.info)))
        validate_conformation(self)

    def __reduce__(self):
        args = (self.positions, self.species, self.ref_energy, self.ref_forces, dict(self.info))
        return (Conformation, args)

    @property
    def n_atoms(self) -> int:
        return len(self.species)

    def replace(self, **changes) -> "Conformation":
        fields = dict(
            positions=self.positions,
            species=self.species,
            ref_energy=self.ref_energy,
            ref_forces=self.ref_forces,
            info=self.info,
        )
        fields.update(changes)
        return Conformation(**fields)


def validate_conformation(c: Conformation) -> Conformation:
    pos = c.positions
    if pos.ndim != 2 or pos.shape[1] != 3:
        raise ShapeMismatch(f"positions must be (n, 3), got {pos.shape}")
    if pos.shape[0] != len(c.species):
        raise ShapeMismatch(f"{len(c.species)} species but {pos.shape[0]} position rows")
    if c.ref_forces is not None and c.ref_forces.shape != pos.shape:
        raise ShapeMismatch(f"ref_forces shape {c.ref_forces.shape} != positions shape {pos.shape}")
    if not np.all(np.isfinite(pos)):
        bad = int(np.argwhere(~np.isfinite(pos))[0][0])
        raise NonFiniteCoordinate(f"non-finite coordinate on atom {bad}")
    if np.any(c.species < 0):
        raise ShapeMismatch("species ids must be non-negative")
    return c


def interatomic_distance_matrix(c: Conformation) -> np.ndarray:
    """Euclidean distances; each pair is computed once and mirrored."""
    pos = c.positions
    n = len(pos)
    i, j = np.triu_indices(n, k=1)
    diff = pos[j] - pos[i]
    d = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    out = np.zeros((n, n))
    out[i, j] = d
    out[j, i] = d
    return out


@dataclass(frozen=True, eq=False)
class Trajectory:
    frames: tuple[Conformation, ...]
    timestep_fs: float = 0.5
    source_tag: str = "oracle"

    def __post_init__(self):
        frames = tuple(self.frames)
        object.__setattr__(self, "frames", frames)
        if not frames:
            raise EmptyTrajectory("trajectory has no frames")
        if not self.timestep_fs > 0:
            raise ValueError("timestep_fs must be positive")
        ref = frames[0].species
        for k, fr in enumerate(frames[1:], start=1):
            if not np.array_equal(fr.species, ref):
                raise InconsistentSpecies(f"frame {k} species differ from frame 0")

    def __len__(self):
        return len(self.frames)

    def __getitem__(self, k):
        return self.frames[k]

    def __iter__(self):
        return iter(self.frames)

    @property
    def species(self) -> np.ndarray:
        return self.frames[0].species

    def positions(self) -> np.ndarray:
        return np.stack([f.positions for f in self.frames])
