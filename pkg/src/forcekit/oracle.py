"""Harmonic-bond + Lennard-Jones reference potential.

This is the stand-in for ab initio labels: cheap, analytic and exactly
conservative, so every downstream component can be checked against it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .chem import ELEMENTS, Conformation, ElementTable, Trajectory
from .errors import InvalidMolecule, OverlappingAtoms, SpeciesMismatch

OVERLAP_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class MoleculeSpec:
    """Topology and parameters of one toy molecule.

    ``bonds`` rows are ``(i, j, k, r0)`` with energy ``k (d - r0)^2``.
    ``lj`` maps an unordered element-id pair to ``(epsilon, sigma)``.
    Lennard-Jones acts on every pair that is neither bonded nor shares a
    bonded neighbour. ``positions`` is an optional reference geometry used
    to start simulations.
    """

    name: str
    species: tuple[int, ...]
    bonds: tuple[tuple[int, int, float, float], ...]
    lj: Mapping[tuple[int, int], tuple[float, float]]
    positions: np.ndarray | None = None
    elements: ElementTable = ELEMENTS

    def __post_init__(self):
        n = len(self.species)
        object.__setattr__(self, "species", tuple(int(s) for s in self.species))
        bonds = tuple((int(i), int(j), float(k), float(r0)) for i, j, k, r0 in self.bonds)
        object.__setattr__(self, "bonds", bonds)
        lj = {}
        for (a, b), (eps, sig) in dict(self.lj).items():
            if eps < 0 or not sig > 0:
                raise InvalidMolecule(f"LJ pair ({a}, {b}) needs eps >= 0 and sigma > 0")
            lj[(min(a, b), max(a, b))] = (float(eps), float(sig))
        object.__setattr__(self, "lj", lj)
        for s in self.species:
            if not 0 <= s < len(self.elements):
                raise InvalidMolecule(f"unknown element id {s}")
        seen = set()
        for i, j, k, r0 in bonds:
            if not (0 <= i < n and 0 <= j < n) or i == j:
                raise InvalidMolecule(f"bad bond indices ({i}, {j})")
            if not k > 0 or not r0 > 0:
                raise InvalidMolecule(f"bond ({i}, {j}) needs k > 0 and r0 > 0")
            key = (min(i, j), max(i, j))
            if key in seen:
                raise InvalidMolecule(f"duplicate bond {key}")
            seen.add(key)
        if self.positions is not None:
            pos = np.array(self.positions, dtype=np.float64)
            if pos.shape != (n, 3):
                raise InvalidMolecule(f"positions shape {pos.shape} != ({n}, 3)")
            pos.setflags(write=False)
            object.__setattr__(self, "positions", pos)
        # precomputed index arrays for the vectorised evaluator
        b = np.array([(i, j) for i, j, _, _ in bonds], dtype=np.int64).reshape(-1, 2)
        object.__setattr__(self, "_bond_ij", b)
        object.__setattr__(self, "_bond_k", np.array([k for *_, k, _ in bonds]))
        object.__setattr__(self, "_bond_r0", np.array([r0 for *_, r0 in bonds]))
        pi, pj = lj_pairs(n, bonds)
        eps = np.zeros(len(pi))
        sig = np.ones(len(pi))
        for m, (i, j) in enumerate(zip(pi, pj)):
            a, c = sorted((self.species[i], self.species[j]))
            if (a, c) not in lj:
                raise InvalidMolecule(
                    f"no LJ parameters for {self.elements.symbol_of(a)}-{self.elements.symbol_of(c)}"
                )
            eps[m], sig[m] = lj[(a, c)]
        object.__setattr__(self, "_bond_inc", _incidence(n, b[:, 0], b[:, 1]))
        object.__setattr__(self, "_lj_inc", _incidence(n, pi, pj))
        object.__setattr__(self, "_lj_i", pi)
        object.__setattr__(self, "_lj_j", pj)
        object.__setattr__(self, "_lj_eps", eps)
        object.__setattr__(self, "_lj_sig", sig)

    @property
    def n_atoms(self) -> int:
        return len(self.species)

    def conformation(self) -> Conformation:
        if self.positions is None:
            raise InvalidMolecule(f"molecule {self.name!r} has no reference geometry")
        return Conformation(self.positions, self.species)


def _incidence(n, i, j):
    # row i gets +g, row j gets -g for each pair
    m = np.zeros((n, len(i)))
    m[i, np.arange(len(i))] = 1.0
    m[j, np.arange(len(j))] = -1.0
    return m


def lj_pairs(n: int, bonds: Sequence[tuple]) -> tuple[np.ndarray, np.ndarray]:
    """Pairs i<j that are not bonded and do not share a bonded neighbour."""
    nbr = [set() for _ in range(n)]
    for i, j, *_ in bonds:
        nbr[i].add(j)
        nbr[j].add(i)
    pi, pj = [], []
    for i in range(n):
        for j in range(i + 1, n):
            if j in nbr[i] or nbr[i] & nbr[j]:
                continue
            pi.append(i)
            pj.append(j)
    return np.array(pi, dtype=np.int64), np.array(pj, dtype=np.int64)


def energy_forces_array(spec: MoleculeSpec, pos: np.ndarray) -> tuple[float, np.ndarray]:
    """Oracle energy (eV) and forces (eV/A) for a raw (n, 3) position array."""
    forces = np.zeros_like(pos)
    energy = 0.0

    bij = spec._bond_ij
    if len(bij):
        rij = pos[bij[:, 1]] - pos[bij[:, 0]]
        d = np.sqrt(np.einsum("ij,ij->i", rij, rij))
        dr = d - spec._bond_r0
        energy += float(np.sum(spec._bond_k * dr * dr))
        # dE/d(r_j) = 2k (d - r0) * rij / d
        g = (2.0 * spec._bond_k * dr / d)[:, None] * rij
        forces += spec._bond_inc @ g

    li, lj_ = spec._lj_i, spec._lj_j
    if len(li):
        rij = pos[lj_] - pos[li]
        d2 = np.einsum("ij,ij->i", rij, rij)
        if np.any(d2 < OVERLAP_TOL**2):
            m = int(np.argmax(d2 < OVERLAP_TOL**2))
            raise OverlappingAtoms(f"atoms {li[m]} and {lj_[m]} overlap")
        s6 = (spec._lj_sig**2 / d2) ** 3
        s12 = s6 * s6
        eps4 = 4.0 * spec._lj_eps
        energy += float(np.sum(eps4 * (s12 - s6)))
        # dE/dd * 1/d = -eps4 (12 s12 - 6 s6) / d^2
        g = (-eps4 * (12.0 * s12 - 6.0 * s6) / d2)[:, None] * rij
        forces += spec._lj_inc @ g

    return energy, forces


def oracle_energy_forces(spec: MoleculeSpec, c: Conformation) -> tuple[float, np.ndarray]:
    if tuple(c.species.tolist()) != spec.species:
        raise SpeciesMismatch(f"conformation species do not match molecule {spec.name!r}")
    return energy_forces_array(spec, c.positions)


def label(spec: MoleculeSpec, c: Conformation) -> Conformation:
    """Return ``c`` with oracle energy and forces attached."""
    e, f = oracle_energy_forces(spec, c)
    return c.replace(ref_energy=e, ref_forces=f)


class OracleForces:
    """Force provider backed by the analytic potential."""

    source_tag = "oracle"

    def __init__(self, spec: MoleculeSpec):
        self.spec = spec

    def __call__(self, positions: np.ndarray) -> tuple[float, np.ndarray]:
        return energy_forces_array(self.spec, positions)


def generate_reference_trajectory(
    spec: MoleculeSpec,
    temperature: float,
    n_steps: int,
    timestep_fs: float,
    seed: int,
    snapshot_every: int = 1,
    thermostat: str = "nose_hoover",
) -> Trajectory:
    """Labelled oracle trajectory with ``n_steps`` frames.

    Frame 0 is the reference geometry; frame k is the state after
    ``k * snapshot_every`` integrator steps.
    """
    from .md import SimConfig, simulate

    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    cfg = SimConfig(
        temperature=temperature,
        timestep=timestep_fs,
        n_steps=(n_steps - 1) * snapshot_every,
        thermostat=thermostat,
        seed=seed,
        snapshot_every=snapshot_every,
    )
    traj = simulate(spec.conformation(), OracleForces(spec), cfg, masses=spec.elements.masses(spec.species))
    return traj
