"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``PASS`` or ``FAIL`` line with the measured
numbers before asserting. Criteria 4 to 7 share one trained joint model.
"""

import time

import numpy as np
import pytest
import torch

from conftest import random_rotation
from forcekit.calibrate import calibrate_trajectory, fit_linear
from forcekit.cli import main
from forcekit.dataio import format_extxyz, load_builtin, parse_extxyz
from forcekit.errors import SimulationDiverged
from forcekit.md import SignFlipped, SimConfig, init_state, run, simulate
from forcekit.metrics import energy_drift, pearson, stability_series
from forcekit.model import ModelConfig, ModelForces, predict, predict_energy
from forcekit.oracle import OracleForces, generate_reference_trajectory
from forcekit.train import TrainConfig, _stacks, evaluate_stacks, run_single_vs_joint, tail_split, train

MOLECULES = ("chain6", "chain9", "chain12")
NET = ModelConfig(n_layers=2, embed_dim=32, n_heads=4, n_rbf=16, cutoff=5.0)
TRAIN = TrainConfig(epochs=1000, lr0=3e-3, val_every=100, patience=3, batch_size=16, max_steps=4000)
SEEDS_PER_MOLECULE = 8
FRAMES_PER_SEED = 500
SNAPSHOT_EVERY = 20


@pytest.fixture
def report(capsys):
    def emit(number: int, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {number}: {detail}")
        return ok

    return emit


@pytest.fixture(scope="module")
def specs():
    return {name: load_builtin(name) for name in MOLECULES}


@pytest.fixture(scope="module")
def dataset(specs):
    return {
        name: [
            generate_reference_trajectory(spec, 300.0, FRAMES_PER_SEED, 0.5, seed=100 * k + s, snapshot_every=SNAPSHOT_EVERY)
            for s in range(SEEDS_PER_MOLECULE)
        ]
        for k, (name, spec) in enumerate(specs.items())
    }


@pytest.fixture(scope="module")
def comparison(dataset):
    t0 = time.perf_counter()
    rows, models = run_single_vs_joint(dataset, TRAIN, NET)
    return rows, models, time.perf_counter() - t0


@pytest.fixture(scope="module")
def joint_model(comparison):
    return comparison[1]["joint"]


def val_frames(dataset, name):
    return [f for _, f in tail_split({name: dataset[name]}, TRAIN.val_fraction)[1]]


def test_criterion_1_equivariance(specs, joint_model, report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    worst_e, worst_f = 0.0, 0.0
    for k in range(100):
        spec = specs[MOLECULES[k % 3]]
        c = spec.conformation().replace(positions=spec.positions + 0.1 * rng.standard_normal(spec.positions.shape))
        e, f = predict(c, joint_model)
        rot = random_rotation(rng)
        perm = rng.permutation(c.n_atoms)
        moved = c.replace(positions=(c.positions @ rot.T + rng.uniform(-5, 5, 3))[perm], species=c.species[perm])
        e2, f2 = predict(moved, joint_model)
        worst_e = max(worst_e, abs(e2 - e) / max(abs(e), 1e-12))
        worst_f = max(worst_f, float(np.max(np.abs(f2 - (f @ rot.T)[perm]))))
    elapsed = time.perf_counter() - t0
    ok = worst_e <= 1e-8 and worst_f <= 1e-8 and elapsed < 60
    report(1, ok, f"energy rel dev {worst_e:.2e}, force abs dev {worst_f:.2e}, {elapsed:.1f} s")
    assert ok


def test_criterion_2_gradient_soundness(specs, joint_model, report):
    t0 = time.perf_counter()
    spec = specs["chain12"]
    rng = np.random.default_rng(202)
    h = 1e-4
    species = torch.tensor(np.asarray(spec.species)[None])
    worst = 0.0
    for _ in range(20):
        pos = spec.positions + 0.1 * rng.standard_normal(spec.positions.shape)
        _, forces = predict(spec.conformation().replace(positions=pos), joint_model)
        disp = np.zeros((2 * pos.size, *pos.shape))
        for j in range(pos.size):
            disp[2 * j].flat[j] = h
            disp[2 * j + 1].flat[j] = -h
        with torch.no_grad():
            e = joint_model(torch.tensor(pos[None] + disp), species.expand(len(disp), -1)).numpy()
        fd_forces = -(e[0::2] - e[1::2]).reshape(pos.shape) / (2 * h)
        worst = max(worst, float(np.max(np.abs(fd_forces - forces)) / np.max(np.abs(forces))))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-4 and elapsed < 120
    report(2, ok, f"max relative FD error {worst:.2e}, {elapsed:.1f} s")
    assert ok


def test_criterion_3_conservativity(specs, joint_model, report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(303)
    worst_net = 0.0
    for name, spec in specs.items():
        for _ in range(10):
            c = spec.conformation().replace(positions=spec.positions + 0.1 * rng.standard_normal(spec.positions.shape))
            for forces in (predict(c, joint_model)[1], OracleForces(spec)(c.positions)[1]):
                worst_net = max(worst_net, float(np.max(np.abs(forces.sum(axis=0)))) / c.n_atoms)
    spec = specs["chain12"]
    provider = OracleForces(spec)
    cfg = SimConfig(thermostat="none", timestep=0.5, seed=3)
    state = init_state(spec.conformation(), provider, cfg, masses=spec.elements.masses(spec.species))
    totals = []
    run(state, provider, cfg, 100_000, callback=lambda s: totals.append(s.energy + s.kinetic_energy()))
    drift = energy_drift(totals)
    elapsed = time.perf_counter() - t0
    ok = worst_net <= 1e-8 and drift <= 1e-4 and elapsed < 120
    report(3, ok, f"max |sum F|/n {worst_net:.2e}, NVE drift {drift:.2e} over 1e5 steps, {elapsed:.1f} s")
    assert ok


def test_criterion_4_force_centric_training(dataset, comparison, report):
    rows, _, elapsed = comparison
    lines, ok = [], elapsed <= 30 * 60
    for name in MOLECULES:
        ref = np.concatenate([f.ref_forces for f in val_frames(dataset, name)])
        rms = float(np.sqrt(np.mean(ref**2)))
        arms = {r.arm: r.force_mae for r in rows if r.molecule == name}
        rel = arms["joint"] / rms
        ok &= rel <= 0.05 and arms["joint"] <= 2.0 * arms["separate"]
        lines.append(f"{name} joint {rel:.2%} of RMS, separate {arms['separate'] / rms:.2%}")
    report(4, ok, "; ".join(lines) + f"; {elapsed / 60:.1f} min")
    assert ok


def test_criterion_5_calibration(specs, dataset, joint_model, report):
    lines, ok = [], True
    for name, spec in specs.items():
        frames = val_frames(dataset, name)
        energies = np.array([f.ref_energy for f in frames])
        phi = np.array([predict_energy(f, joint_model) for f in frames])
        r = pearson(phi, energies)
        fine = generate_reference_trajectory(spec, 300.0, 2500, 0.02, seed=7)
        cal = calibrate_trajectory(fine, joint_model, m=8)
        mae = float(np.mean(np.abs(cal.apply(phi) - energies))) / spec.n_atoms
        ok &= r >= 0.99 and mae <= 5e-3
        lines.append(f"{name} pearson {r:.4f} calibrated MAE {mae:.2e} eV/atom (w {cal.w:.3f})")
    e = np.linspace(-12.0, -3.0, 9)
    synth = fit_linear(1.7 * e - 4.2, e)
    w_err, b_err = abs(synth.w - 1 / 1.7), abs(synth.b - 4.2 / 1.7)
    ok &= w_err <= 1e-8 and b_err <= 1e-8
    lines.append(f"affine fit error w {w_err:.1e} b {b_err:.1e}")
    report(5, ok, "; ".join(lines))
    assert ok


def test_criterion_6_robustness(specs, joint_model, report):
    spec = specs["chain12"]
    masses = spec.elements.masses(spec.species)
    provider = ModelForces(joint_model, spec.species)
    stable = simulate(spec.conformation(), provider, SimConfig(n_steps=100_000, snapshot_every=50, seed=1), masses)
    rep = stability_series(stable, p=200)
    mean_t = float(np.mean([f.info["temperature"] for f in stable]))
    try:
        flipped = simulate(spec.conformation(), SignFlipped(provider), SimConfig(n_steps=1000, seed=1), masses)
    except SimulationDiverged as err:
        flipped = err.partial
    frep = stability_series(flipped, p=200)
    ok = not rep.collapsed and abs(mean_t - 300.0) <= 45.0 and frep.collapsed and frep.collapse_step <= 1000
    report(
        6,
        ok,
        f"1e5-step model MD collapsed={rep.collapsed}, mean T {mean_t:.1f} K; "
        f"sign-flipped collapse_step {frep.collapse_step}",
    )
    assert ok


def test_criterion_7_extrapolation(dataset, report):
    seen = {name: dataset[name] for name in ("chain6", "chain9")}
    state, _ = train(seen, TrainConfig(epochs=1000, lr0=3e-3, val_every=100, patience=3, max_steps=3000), NET)
    items = [("chain12", f) for t in dataset["chain12"][:2] for f in t.frames]
    mae, cosd = evaluate_stacks(state.best_model(), _stacks(items, False))["chain12"]
    ok = cosd <= 0.05
    report(7, ok, f"unseen chain12 cosine distance {cosd:.4f}, force MAE {mae:.4f} eV/A")
    assert ok


def test_criterion_8_determinism_and_io(specs, tmp_path, report):
    def pipeline(out):
        net = ["--layers", "1", "--embed-dim", "8", "--heads", "2", "--rbf", "4"]
        codes = [
            main(["--threads", "1", "gen-data", "--spec", "chain9", "--steps", "40", "--seed", "5",
                  "--out", str(out / "d.xyz"), "--manifest", str(out / "m.json")]),
            main(["--threads", "1", "train", "--data-manifest", str(out / "m.json"), "--max-steps", "5", *net,
                  "--out-ckpt", str(out / "m.ckpt")]),
            main(["--threads", "1", "simulate", "--ckpt", str(out / "m.ckpt"), "--spec", "chain9", "--steps", "20",
                  "--out", str(out / "md.xyz")]),
        ]
        assert codes == [0, 0, 0]
        return {p.name: p.read_bytes() for p in sorted(out.iterdir())}

    a, b = pipeline(tmp_path / "a"), pipeline(tmp_path / "b")
    identical = a == b
    traj = generate_reference_trajectory(specs["chain12"], 300.0, 30, 0.5, seed=8, snapshot_every=3)
    back = parse_extxyz(format_extxyz(traj))
    lossless = (
        back.positions().tobytes() == traj.positions().tobytes()
        and all(x.ref_forces.tobytes() == y.ref_forces.tobytes() for x, y in zip(back, traj))
        and [x.ref_energy for x in back] == [y.ref_energy for y in traj]
        and [dict(x.info) for x in back] == [dict(y.info) for y in traj]
        and format_extxyz(back) == format_extxyz(traj)
    )
    ok = identical and lossless
    report(8, ok, f"byte-identical reruns {identical} ({len(a)} files), extxyz round trip lossless {lossless}")
    assert ok
