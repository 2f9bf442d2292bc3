"""Extended-XYZ trajectories, molecule spec files and dataset manifests.

Extended-XYZ frame layout::

    <natoms>
    Properties=species:S:1:pos:R:3[:forces:R:3] [energy=<float>] [key=value ...]
    <symbol> <x> <y> <z> [<fx> <fy> <fz>]
    ...

Floats are written with 17 significant digits so a write/read cycle is
lossless for float64.

Molecule spec files are line oriented. ``#`` starts a comment. Top-level
lines are ``key = value`` (``name`` is required); three sections follow::

    name = chain6
    [atoms]
    C  0.0  0.0  0.0        # symbol x y z, one line per atom, in order
    [bonds]
    0  2  14.0  1.43        # i j k(eV/A^2) r0(A)
    [lj]
    C  O  0.005  3.1        # symbol symbol epsilon(eV) sigma(A)
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .chem import ELEMENTS, Conformation, ElementTable, Trajectory
from .errors import EmptyDataset, EmptyTrajectory, InconsistentSpecies, ParseError
from .oracle import MoleculeSpec

_RESERVED = {"Properties", "energy", "timestep_fs", "source_tag"}


def _fmt(x: float) -> str:
    return f"{x:.16e}"


def _fmt_info(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "T" if v else "F"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return _fmt(float(v))
    s = str(v)
    if not s or any(ch.isspace() for ch in s) or "=" in s:
        raise ValueError(f"info value {v!r} cannot be written unquoted")
    return s


def _parse_value(s: str):
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        return s


def format_extxyz(traj: Trajectory, elements: ElementTable = ELEMENTS) -> str:
    if not isinstance(traj, Trajectory):
        traj = Trajectory(tuple(traj))
    if len(traj) == 0:
        raise EmptyTrajectory("nothing to write")
    symbols = [elements.symbol_of(int(z)) for z in traj.species]
    out = []
    for fr in traj:
        props = "species:S:1:pos:R:3"
        if fr.ref_forces is not None:
            props += ":forces:R:3"
        head = [f"Properties={props}"]
        if fr.ref_energy is not None:
            head.append(f"energy={_fmt(fr.ref_energy)}")
        head.append(f"timestep_fs={_fmt(traj.timestep_fs)}")
        head.append(f"source_tag={_fmt_info(traj.source_tag)}")
        for k in sorted(fr.info):
            if k in _RESERVED:
                raise ValueError(f"info key {k!r} is reserved")
            head.append(f"{k}={_fmt_info(fr.info[k])}")
        out.append(str(fr.n_atoms))
        out.append(" ".join(head))
        for a in range(fr.n_atoms):
            cols = [symbols[a]] + [_fmt(x) for x in fr.positions[a]]
            if fr.ref_forces is not None:
                cols += [_fmt(x) for x in fr.ref_forces[a]]
            out.append(" ".join(cols))
    return "\n".join(out) + "\n"


def write_extxyz(traj: Trajectory, path, elements: ElementTable = ELEMENTS) -> None:
    text = format_extxyz(traj, elements)
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(text)


def _parse_properties(spec: str, lineno: int) -> bool:
    parts = spec.split(":")
    if len(parts) % 3:
        raise ParseError(f"malformed Properties {spec!r}", lineno)
    cols = [tuple(parts[k : k + 3]) for k in range(0, len(parts), 3)]
    if cols[:2] != [("species", "S", "1"), ("pos", "R", "3")]:
        raise ParseError("Properties must start with species:S:1:pos:R:3", lineno)
    if len(cols) == 2:
        return False
    if cols[2:] == [("forces", "R", "3")]:
        return True
    raise ParseError(f"unsupported Properties {spec!r}", lineno)


def parse_extxyz(text: str, elements: ElementTable = ELEMENTS) -> Trajectory:
    lines = text.splitlines()
    frames = []
    timestep = None
    source = None
    k = 0
    while k < len(lines):
        if not lines[k].strip():
            k += 1
            continue
        head_no = k + 1
        try:
            natoms = int(lines[k].strip())
        except ValueError:
            raise ParseError(f"expected atom count, got {lines[k]!r}", head_no) from None
        if natoms < 1:
            raise ParseError("atom count must be positive", head_no)
        if k + 1 >= len(lines):
            raise ParseError("missing comment line", head_no + 1)
        kv = {}
        for tok in lines[k + 1].split():
            if "=" not in tok:
                raise ParseError(f"expected key=value, got {tok!r}", head_no + 1)
            key, val = tok.split("=", 1)
            kv[key] = val
        if "Properties" not in kv:
            raise ParseError("comment line lacks Properties=", head_no + 1)
        has_forces = _parse_properties(kv.pop("Properties"), head_no + 1)
        energy = float(kv.pop("energy")) if "energy" in kv else None
        if "timestep_fs" in kv:
            timestep = float(kv.pop("timestep_fs")) if timestep is None else timestep
            kv.pop("timestep_fs", None)
        if "source_tag" in kv:
            val = kv.pop("source_tag")
            source = val if source is None else source
        info = {key: _parse_value(v) for key, v in kv.items()}
        ncol = 7 if has_forces else 4
        body = lines[k + 2 : k + 2 + natoms]
        if len(body) < natoms or any(not ln.strip() for ln in body):
            raise ParseError(
                f"frame {len(frames)} declares {natoms} atoms but has fewer atom lines", head_no
            )
        species = []
        data = np.empty((natoms, ncol - 1))
        for a, ln in enumerate(body):
            cols = ln.split()
            lineno = k + 3 + a
            if len(cols) != ncol:
                raise ParseError(f"expected {ncol} columns, got {len(cols)}", lineno)
            try:
                species.append(elements.id_of(cols[0]))
            except KeyError as err:
                raise ParseError(str(err), lineno) from None
            try:
                data[a] = [float(x) for x in cols[1:]]
            except ValueError:
                raise ParseError("non-numeric column", lineno) from None
        if frames and species != frames[0].species.tolist():
            raise InconsistentSpecies(f"frame {len(frames)} species differ from frame 0", head_no)
        try:
            frames.append(
                Conformation(
                    data[:, :3],
                    species,
                    energy,
                    data[:, 3:6] if has_forces else None,
                    info,
                )
            )
        except ValueError as err:
            raise ParseError(str(err), head_no) from None
        k += 2 + natoms
    if not frames:
        raise ParseError("no frames found", 1)
    return Trajectory(frames, timestep if timestep is not None else 1.0, source or "file")


def read_extxyz(path, elements: ElementTable = ELEMENTS) -> Trajectory:
    with open(path, encoding="ascii") as fh:
        return parse_extxyz(fh.read(), elements)


# --- molecule spec files -------------------------------------------------


def parse_molecule_spec(text: str, elements: ElementTable = ELEMENTS) -> MoleculeSpec:
    meta = {}
    atoms, pos, bonds, lj = [], [], [], {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip().lower()
            if section not in ("atoms", "bonds", "lj"):
                raise ParseError(f"unknown section [{section}]", lineno)
            continue
        cols = line.split()
        try:
            if section is None:
                if "=" not in line:
                    raise ParseError("expected key = value", lineno)
                key, val = (s.strip() for s in line.split("=", 1))
                meta[key] = val
            elif section == "atoms":
                if len(cols) != 4:
                    raise ParseError("atom line needs: symbol x y z", lineno)
                atoms.append(elements.id_of(cols[0]))
                pos.append([float(x) for x in cols[1:]])
            elif section == "bonds":
                if len(cols) != 4:
                    raise ParseError("bond line needs: i j k r0", lineno)
                bonds.append((int(cols[0]), int(cols[1]), float(cols[2]), float(cols[3])))
            else:
                if len(cols) != 4:
                    raise ParseError("lj line needs: symbol symbol epsilon sigma", lineno)
                key = tuple(sorted((elements.id_of(cols[0]), elements.id_of(cols[1]))))
                lj[key] = (float(cols[2]), float(cols[3]))
        except (KeyError, ValueError) as err:
            if isinstance(err, ParseError):
                raise
            raise ParseError(str(err), lineno) from None
    if "name" not in meta:
        raise ParseError("missing 'name = ...'", 1)
    if not atoms:
        raise ParseError("no [atoms] entries", 1)
    return MoleculeSpec(meta["name"], tuple(atoms), tuple(bonds), lj, np.array(pos), elements)


def read_molecule_spec(path, elements: ElementTable = ELEMENTS) -> MoleculeSpec:
    with open(path, encoding="utf-8") as fh:
        return parse_molecule_spec(fh.read(), elements)


def format_molecule_spec(spec: MoleculeSpec) -> str:
    el = spec.elements
    out = [f"name = {spec.name}", "[atoms]"]
    pos = spec.positions if spec.positions is not None else np.zeros((spec.n_atoms, 3))
    for z, p in zip(spec.species, pos):
        out.append(f"{el.symbol_of(z):<2s} {p[0]: .6f} {p[1]: .6f} {p[2]: .6f}")
    out.append("[bonds]")
    for i, j, k, r0 in spec.bonds:
        out.append(f"{i} {j} {k:g} {r0:.6f}")
    out.append("[lj]")
    for (a, b), (eps, sig) in sorted(spec.lj.items()):
        out.append(f"{el.symbol_of(a)} {el.symbol_of(b)} {eps:g} {sig:g}")
    return "\n".join(out) + "\n"


def builtin_spec_path(name: str) -> Path:
    """Path of a shipped toy molecule file, e.g. ``chain6``."""
    return Path(__file__).parent / "data" / f"{name}.mol"


def load_builtin(name: str) -> MoleculeSpec:
    return read_molecule_spec(builtin_spec_path(name))


TOY_MOLECULES = ("chain6", "chain9", "chain12")


# --- dataset manifest ----------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    molecule: str
    path: str
    role: str  # train | val | test
    start: int = 0  # frame slice [start, stop) within the file
    stop: int | None = None


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...]
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        keys = [(e.path, e.start, e.stop) for e in self.entries]
        if len(set(keys)) != len(keys):
            raise ValueError("manifest entries must be unique")
        for e in self.entries:
            if e.role not in ("train", "val", "test"):
                raise ValueError(f"bad role {e.role!r}")

    def molecules(self, role: str) -> list[str]:
        seen = []
        for e in self.entries:
            if e.role == role and e.molecule not in seen:
                seen.append(e.molecule)
        return seen

    def to_json(self) -> str:
        return json.dumps(
            {"seed": self.seed, "entries": [vars(e) for e in self.entries]}, indent=1, sort_keys=True
        )

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        d = json.loads(text)
        return cls(tuple(ManifestEntry(**e) for e in d["entries"]), d.get("seed", 0))


def write_manifest(manifest: DatasetManifest, path) -> None:
    Path(path).write_text(manifest.to_json() + "\n")


def read_manifest(path) -> DatasetManifest:
    return DatasetManifest.from_json(Path(path).read_text())


def n_val_frames(n_frames: int, val_fraction: float) -> int:
    """Validation tail length: ceil(fraction * n), at least 1, leaving >= 1 train frame."""
    if not 0 < val_fraction < 1:
        raise ValueError("val_fraction must be in (0, 1)")
    k = math.ceil(round(val_fraction * n_frames, 9))
    return min(max(k, 1), n_frames - 1) if n_frames > 1 else 0


def split_dataset(
    trajs: Sequence[tuple[str, str, int]] | Iterable[tuple[str, str, int]],
    val_fraction: float,
    seed: int = 0,
) -> DatasetManifest:
    """Temporal tail split of each trajectory.

    ``trajs`` holds ``(molecule, path, n_frames)`` triples; the last
    ``ceil(val_fraction * n_frames)`` frames of each become validation.
    The split is deterministic; ``seed`` is recorded for downstream shuffling.
    """
    trajs = list(trajs)
    if not 0 < val_fraction < 1:
        raise ValueError("val_fraction must be in (0, 1)")
    if not trajs:
        raise EmptyDataset("no trajectories to split")
    entries = []
    for mol, path, n in trajs:
        k = n_val_frames(n, val_fraction)
        entries.append(ManifestEntry(mol, os.fspath(path), "train", 0, n - k))
        if k:
            entries.append(ManifestEntry(mol, os.fspath(path), "val", n - k, n))
    return DatasetManifest(tuple(entries), seed)


def load_manifest_data(manifest: DatasetManifest, base: Path | None = None) -> dict[str, dict[str, list]]:
    """``{role: {molecule: [Trajectory, ...]}}`` with each entry's frame slice applied."""
    cache = {}
    out: dict[str, dict[str, list]] = {}
    for e in manifest.entries:
        p = Path(e.path)
        if base is not None and not p.is_absolute():
            p = base / p
        if p not in cache:
            cache[p] = read_extxyz(p)
        t = cache[p]
        frames = t.frames[e.start : e.stop]
        if not frames:
            continue
        out.setdefault(e.role, {}).setdefault(e.molecule, []).append(
            Trajectory(frames, t.timestep_fs, t.source_tag)
        )
    return out
