"""Command-line entry point: ``forcekit <subcommand> [flags]``.

Exit codes: 0 success, 2 bad configuration, 3 runtime failure, 4 unparseable
input file. Every run prints its resolved configuration as one JSON line on
stderr before doing any work. ``--config FILE`` (before the subcommand)
reads flat ``key = value`` lines whose keys are flag names; flags given on
the command line override the file.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .calibrate import CalibrationModel, calibrate_trajectory
from .chem import Trajectory
from .dataio import (
    DatasetManifest,
    builtin_spec_path,
    load_manifest_data,
    read_extxyz,
    read_manifest,
    read_molecule_spec,
    split_dataset,
    write_extxyz,
    write_manifest,
)
from .errors import ForcekitError, ParseError, SimulationDiverged
from .metrics import cosine_distance, force_mae, rmsd, stability_series
from .md import SimConfig, simulate
from .model import ModelConfig, ModelForces, load_checkpoint, predict, save_checkpoint
from .oracle import OracleForces, generate_reference_trajectory
from .train import TrainConfig, metrics_csv, train

EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_PARSE = 4


class ConfigError(Exception):
    pass


# --- helpers -------------------------------------------------------------------


def _resolve_spec(name_or_path: str):
    p = Path(name_or_path)
    if not p.exists():
        p = builtin_spec_path(name_or_path)
    if not p.exists():
        raise ConfigError(f"no molecule spec file or built-in molecule named {name_or_path!r}")
    return read_molecule_spec(p)


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what} {path!r} does not exist")
    return p


def _write_text(path, text: str) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(text)


OUTPUT_FLAGS = ("out", "out_ckpt", "manifest", "metrics", "report", "scatter", "csv")


def _make_output_dirs(args) -> None:
    for name in OUTPUT_FLAGS:
        value = getattr(args, name, None)
        if value:
            Path(value).parent.mkdir(parents=True, exist_ok=True)


def _sidecar(path: str, suffix: str) -> Path:
    p = Path(path)
    return p.with_name(p.stem + suffix)


def read_config_file(path) -> list[str]:
    """Turn ``key = value`` lines into ``--key value`` tokens."""
    tokens = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}: line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        flag = "--" + key.replace("_", "-")
        low = value.lower()
        if low in ("true", "yes", "on"):
            tokens.append(flag)
        elif low in ("false", "no", "off"):
            continue
        else:
            tokens += [flag, value]
    return tokens


# --- subcommands ---------------------------------------------------------------


def cmd_gen_data(args) -> int:
    spec = _resolve_spec(args.spec)
    traj = generate_reference_trajectory(
        spec, args.temp, args.steps, args.dt, args.seed, args.snapshot_every, args.thermostat
    )
    write_extxyz(traj, args.out)
    if args.manifest:
        rel = os.path.relpath(args.out, Path(args.manifest).parent)
        new = split_dataset([(spec.name, rel, len(traj))], args.val_fraction, args.seed)
        old = read_manifest(args.manifest).entries if Path(args.manifest).exists() else ()
        keep = tuple(e for e in old if e.path != new.entries[0].path)
        write_manifest(DatasetManifest(keep + new.entries, args.seed), args.manifest)
    return 0


def _train_config(args) -> tuple[TrainConfig, ModelConfig]:
    try:
        tc = TrainConfig(
            epochs=args.epochs,
            lr0=args.lr,
            decay_factor=args.decay_factor,
            patience=args.patience,
            val_fraction=args.val_fraction,
            val_every=args.val_every,
            batch_size=args.batch_size,
            seed=args.seed,
            objective=args.objective,
            joint_energy_weight=args.energy_weight,
            weight_decay=args.weight_decay,
            max_steps=args.max_steps,
        )
        mc = ModelConfig(
            n_layers=args.layers, embed_dim=args.embed_dim, n_heads=args.heads, n_rbf=args.rbf, cutoff=args.cutoff
        )
    except ValueError as err:
        raise ConfigError(str(err)) from None
    return tc, mc


def cmd_train(args) -> int:
    tc, mc = _train_config(args)
    manifest_path = _existing(args.data_manifest, "manifest")
    try:
        manifest = read_manifest(manifest_path)
    except (ValueError, KeyError, TypeError) as err:
        raise ParseError(f"bad manifest: {err}") from None
    roles = load_manifest_data(manifest, manifest_path.parent)
    if "train" not in roles:
        raise ConfigError("manifest has no train entries")
    state, rows = train(roles["train"], tc, mc, val_data=roles.get("val"))
    extra = {"steps": state.step, "best_val_force_mae": None if not rows else state.best_val}
    save_checkpoint(state.best_model(), args.out_ckpt, extra)
    metrics = args.metrics or _sidecar(args.out_ckpt, ".metrics.csv")
    _write_text(metrics, metrics_csv(rows))
    return 0


def cmd_eval(args) -> int:
    model, _ = load_checkpoint(_existing(args.ckpt, "checkpoint"))
    report = {}
    buf_rows = []
    for path in args.data:
        traj = read_extxyz(_existing(path, "trajectory"))
        name = Path(path).stem
        preds, refs = [], []
        for k, frame in enumerate(traj):
            if frame.ref_forces is None:
                raise ConfigError(f"{path}: frame {k} has no reference forces")
            _, f = predict(frame, model)
            preds.append(f)
            refs.append(frame.ref_forces)
            for a in range(frame.n_atoms):
                for c in range(3):
                    buf_rows.append([name, k, a, "xyz"[c], repr(float(frame.ref_forces[a, c])), repr(float(f[a, c]))])
        p, r = np.stack(preds), np.stack(refs)
        report[name] = {
            "n_frames": len(traj),
            "force_mae": force_mae(p, r),
            "cosd": cosine_distance(p, r),
            "force_rms": float(np.sqrt(np.mean(r**2))),
        }
    _write_text(args.report, json.dumps(report, indent=1, sort_keys=True) + "\n")
    scatter = args.scatter or _sidecar(args.report, ".scatter.csv")
    with open(scatter, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["molecule", "frame", "atom", "component", "ref", "pred"])
        w.writerows(buf_rows)
    return 0


def _energy_csv(traj: Trajectory, path) -> None:
    first = traj[0]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        cols = ["step", "time_fs", "potential_energy", "kinetic_energy", "total_energy", "temperature", "rmsd"]
        has_cal = "calibrated_energy" in first.info
        if has_cal:
            cols.append("calibrated_energy")
        w.writerow(cols)
        for f in traj:
            step = int(f.info["step"])
            ke = float(f.info["kinetic_energy"])
            row = [step, repr(step * traj.timestep_fs), repr(f.ref_energy), repr(ke), repr(f.ref_energy + ke)]
            row += [repr(float(f.info["temperature"])), repr(rmsd(f, first))]
            if has_cal:
                row.append(repr(float(f.info["calibrated_energy"])))
            w.writerow(row)


def cmd_simulate(args) -> int:
    if bool(args.ckpt) == bool(args.oracle):
        raise ConfigError("give exactly one of --ckpt or --oracle")
    spec = _resolve_spec(args.spec)
    c0 = spec.conformation()
    if args.init:
        c0 = read_extxyz(_existing(args.init, "initial trajectory"))[-1]
        if c0.n_atoms != spec.n_atoms or not np.array_equal(c0.species, spec.species):
            raise ConfigError("--init geometry does not match the molecule spec")
    try:
        cfg = SimConfig(args.temp, args.dt, args.steps, args.thermostat, args.tau, args.seed, args.snapshot_every)
    except ValueError as err:
        raise ConfigError(str(err)) from None
    calibration = None
    if args.oracle:
        provider = OracleForces(spec)
    else:
        model, _ = load_checkpoint(_existing(args.ckpt, "checkpoint"))
        provider = ModelForces(model, c0.species)
        if args.calibration:
            calibration = CalibrationModel.load(_existing(args.calibration, "calibration"))
    masses = spec.elements.masses(c0.species)
    energy_csv = args.csv or _sidecar(args.out, ".energy.csv")
    try:
        traj = simulate(c0, provider, cfg, masses=masses, calibration=calibration)
    except SimulationDiverged as err:
        if err.partial is not None:
            write_extxyz(err.partial, args.out)
            _energy_csv(err.partial, energy_csv)
        raise
    write_extxyz(traj, args.out)
    _energy_csv(traj, energy_csv)
    return 0


def cmd_calibrate(args) -> int:
    model, _ = load_checkpoint(_existing(args.ckpt, "checkpoint"))
    traj = read_extxyz(_existing(args.traj, "trajectory"))
    cal = calibrate_trajectory(traj, model, args.m, taylor_sign=args.taylor_sign)
    _write_text(args.out, cal.to_json() + "\n")
    return 0


def cmd_stability(args) -> int:
    if args.p < 1:
        raise ConfigError("--p must be >= 1")
    traj = read_extxyz(_existing(args.traj, "trajectory"))
    rep = stability_series(traj, args.p)
    _write_text(args.report, rep.summary_json() + "\n")
    _write_text(args.csv or _sidecar(args.report, ".series.csv"), rep.to_csv())
    return 0


# --- parser --------------------------------------------------------------------

REQUIRED = {
    "gen-data": ("spec", "out"),
    "train": ("data_manifest", "out_ckpt"),
    "eval": ("ckpt", "data", "report"),
    "simulate": ("spec", "out"),
    "calibrate": ("ckpt", "traj", "out"),
    "stability": ("traj", "report"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="forcekit", description="Force-centric neural forcefield toolkit.")
    parser.add_argument("--version", action="version", version=f"forcekit {__version__}")
    parser.add_argument("--config", help="flat key = value file; command-line flags override it")
    parser.add_argument("--threads", type=int, default=None, help="torch intra-op threads (default: all cores)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("gen-data", help="oracle MD reference trajectory")
    p.add_argument("--spec", help="molecule spec file or built-in name (chain6, chain9, chain12)")
    p.add_argument("--temp", type=float, default=300.0)
    p.add_argument("--steps", type=int, default=1000, help="frames to write")
    p.add_argument("--dt", type=float, default=0.5, help="timestep in fs")
    p.add_argument("--snapshot-every", type=int, default=1)
    p.add_argument("--thermostat", choices=("nose_hoover", "none"), default="nose_hoover")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--manifest", help="add the file to this dataset manifest with a tail validation split")
    p.add_argument("--val-fraction", type=float, default=0.05)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a dataset manifest")
    p.add_argument("--data-manifest")
    p.add_argument("--objective", choices=("force_only", "joint"), default="force_only")
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--decay-factor", type=float, default=0.8)
    p.add_argument("--patience", type=int, default=30)
    p.add_argument("--val-every", type=int, default=500)
    p.add_argument("--val-fraction", type=float, default=0.05)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--weight-decay", type=float, default=0.01)
    p.add_argument("--energy-weight", type=float, default=1.0)
    p.add_argument("--layers", type=int, default=6)
    p.add_argument("--embed-dim", type=int, default=128)
    p.add_argument("--heads", type=int, default=8)
    p.add_argument("--rbf", type=int, default=32)
    p.add_argument("--cutoff", type=float, default=5.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-ckpt")
    p.add_argument("--metrics", help="metrics CSV (default: next to the checkpoint)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="force MAE / cosine distance and scatter data")
    p.add_argument("--ckpt")
    p.add_argument("--data", action="append", help="labelled extended-XYZ file; repeatable")
    p.add_argument("--report")
    p.add_argument("--scatter", help="pred-vs-ref CSV (default: next to the report)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("simulate", help="MD with a trained model or the oracle")
    p.add_argument("--ckpt")
    p.add_argument("--oracle", action="store_true")
    p.add_argument("--spec")
    p.add_argument("--init", help="extended-XYZ file whose last frame is the starting geometry")
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--temp", type=float, default=300.0)
    p.add_argument("--dt", type=float, default=0.5)
    p.add_argument("--tau", type=float, default=None, help="thermostat time constant in fs")
    p.add_argument("--thermostat", choices=("nose_hoover", "none"), default="nose_hoover")
    p.add_argument("--snapshot-every", type=int, default=1)
    p.add_argument("--calibration", help="calibration JSON; adds calibrated energies")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--csv", help="energy/RMSD CSV (default: next to the trajectory)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("calibrate", help="fit the energy calibration along a labelled trajectory")
    p.add_argument("--ckpt")
    p.add_argument("--traj")
    p.add_argument("--m", type=int, default=8, help="fit on m + 1 uniformly spaced frames")
    p.add_argument("--taylor-sign", type=int, choices=(1, -1), default=1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("stability", help="collapse statistics of a trajectory")
    p.add_argument("--traj")
    p.add_argument("--p", type=int, default=200, help="sliding window in frames")
    p.add_argument("--report")
    p.add_argument("--csv", help="per-frame series CSV (default: next to the report)")
    p.set_defaults(func=cmd_stability)
    parser.subcommands = sub.choices
    return parser


def _argv_with_config(argv: list[str]) -> list[str]:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    ns, _ = pre.parse_known_args(argv)
    if not ns.config:
        return argv
    tokens = read_config_file(_existing(ns.config, "config file"))
    for k, tok in enumerate(argv):
        if tok in REQUIRED:
            return argv[: k + 1] + tokens + argv[k + 1 :]
    return argv


def _resolved(args) -> dict:
    out = {}
    for k, v in sorted(vars(args).items()):
        if k == "func":
            continue
        out[k] = os.fspath(v) if isinstance(v, Path) else v
    return out


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        argv = _argv_with_config(argv)
    except ConfigError as err:
        print(f"forcekit: error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    missing = [name for name in REQUIRED[args.command] if not getattr(args, name)]
    if missing:
        parser.subcommands[args.command].print_usage(sys.stderr)
        flags = ", ".join("--" + m.replace("_", "-") for m in missing)
        print(f"forcekit {args.command}: error: missing required {flags}", file=sys.stderr)
        return EXIT_CONFIG
    threads = args.threads if args.threads is not None else (os.cpu_count() or 1)
    if threads < 1:
        print("forcekit: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    torch.set_num_threads(threads)
    print(json.dumps(_resolved(args), sort_keys=True), file=sys.stderr)
    try:
        _make_output_dirs(args)
        return args.func(args)
    except ConfigError as err:
        print(f"forcekit {args.command}: error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except ParseError as err:
        print(f"forcekit {args.command}: parse error: {err}", file=sys.stderr)
        return EXIT_PARSE
    except (ForcekitError, ValueError, OSError) as err:
        print(f"forcekit {args.command}: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
