"""Builder for the shipped toy polymer chains.

Each chain repeats a (C, H, O) unit: a zig-zag C-O backbone with one
hydrogen per carbon. Every pair of bonds sharing an atom gets an extra
harmonic 1-3 distance restraint standing in for an angle term, so the
whole local geometry is held by harmonic springs while distant atoms
interact through Lennard-Jones. The shipped ``data/chain*.mol`` files are
``format_molecule_spec(build_chain(n_units))``.
"""

from __future__ import annotations

import itertools

import numpy as np

from .chem import ELEMENTS
from .oracle import MoleculeSpec

BOND_CO = (14.0, 1.43)  # k eV/A^2, r0 A
BOND_CH = (14.0, 1.09)
K_13 = 2.0
BACKBONE_ANGLE = np.deg2rad(112.0)
H_TILT = np.deg2rad(50.0)

# epsilon eV, sigma A
LJ = {
    ("H", "H"): (0.002, 2.4),
    ("C", "H"): (0.0028, 2.85),
    ("H", "O"): (0.0035, 2.7),
    ("C", "C"): (0.004, 3.3),
    ("C", "O"): (0.0049, 3.15),
    ("O", "O"): (0.006, 3.0),
}


def build_chain(n_units: int) -> MoleculeSpec:
    if n_units < 1:
        raise ValueError("need at least one unit")
    h, c, o = (ELEMENTS.id_of(s) for s in "HCO")
    species, pos = [], []
    half = BACKBONE_ANGLE / 2
    ax, ay = BOND_CO[1] * np.sin(half), BOND_CO[1] * np.cos(half)
    for u in range(n_units):
        kc, ko = 2 * u, 2 * u + 1  # backbone indices
        pc = np.array([kc * ax, 0.0, 0.0])
        po = np.array([ko * ax, ay, 0.0])
        side = 1.0 if u % 2 == 0 else -1.0
        ph = pc + BOND_CH[1] * np.array([0.0, -np.cos(H_TILT), side * np.sin(H_TILT)])
        species += [c, h, o]
        pos += [pc, ph, po]
    pos = np.array(pos)

    real = []
    for u in range(n_units):
        ci, hi, oi = 3 * u, 3 * u + 1, 3 * u + 2
        real.append((ci, hi, *BOND_CH))
        real.append((ci, oi, *BOND_CO))
        if u + 1 < n_units:
            real.append((oi, 3 * (u + 1), *BOND_CO))
    nbr = {i: [] for i in range(len(species))}
    for i, j, *_ in real:
        nbr[i].append(j)
        nbr[j].append(i)
    bonds = [(i, j, k, _dist(pos, i, j)) for i, j, k, _ in real]
    for centre in range(len(species)):
        for a, b in itertools.combinations(sorted(nbr[centre]), 2):
            bonds.append((a, b, K_13, _dist(pos, a, b)))
    # round so that the text file round-trips exactly
    bonds = [(i, j, k, round(r0, 6)) for i, j, k, r0 in bonds]
    lj = {tuple(sorted((ELEMENTS.id_of(a), ELEMENTS.id_of(b)))): v for (a, b), v in LJ.items()}
    return MoleculeSpec(f"chain{3 * n_units}", tuple(species), tuple(bonds), lj, np.round(pos, 6))


def _dist(pos, i, j):
    return float(np.linalg.norm(pos[i] - pos[j]))
