import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from forcekit.calibrate import (
    CalibrationModel,
    calibrate_trajectory,
    calibrated_energy,
    fit_linear,
    sample_indices,
    taylor_energy_series,
)
from forcekit.chem import Conformation, Trajectory
from forcekit.errors import DegenerateFit, MissingInitialEnergy, TooShort
from forcekit.model import predict_energy
from forcekit.oracle import OracleForces, generate_reference_trajectory


def taylor_error(spec, dt, span_fs=40.0):
    n = int(round(span_fs / dt)) + 1
    traj = generate_reference_trajectory(spec, 300.0, n, dt, seed=4, thermostat="none")
    est = taylor_energy_series(traj, OracleForces(spec))
    ref = np.array([f.ref_energy for f in traj])
    return float(np.max(np.abs(est - ref)))


def test_stationary_trajectory_keeps_initial_energy(chain6, small_model):
    c = chain6.conformation()
    traj = Trajectory([c] * 5)
    np.testing.assert_array_equal(taylor_energy_series(traj, small_model, e0=-3.0), np.full(5, -3.0))


def test_taylor_error_is_first_order(chain6):
    coarse = taylor_error(chain6, 0.4)
    fine = taylor_error(chain6, 0.1)
    assert fine < coarse / 3.0


def test_taylor_sign_flips_increments(chain6, small_model):
    traj = generate_reference_trajectory(chain6, 300.0, 6, 0.5, seed=1)
    plus = taylor_energy_series(traj, small_model, e0=1.0)
    minus = taylor_energy_series(traj, small_model, e0=1.0, taylor_sign=-1)
    np.testing.assert_allclose(plus - 1.0, -(minus - 1.0), rtol=1e-12, atol=1e-15)
    with pytest.raises(ValueError):
        taylor_energy_series(traj, small_model, taylor_sign=0)


def test_model_and_provider_paths_agree(chain9, small_model):
    from forcekit.model import ModelForces

    traj = generate_reference_trajectory(chain9, 300.0, 5, 0.5, seed=2)
    a = taylor_energy_series(traj, small_model)
    b = taylor_energy_series(traj, ModelForces(small_model, traj.species))
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


def test_errors(chain6, small_model):
    c = chain6.conformation()
    with pytest.raises(TooShort):
        taylor_energy_series(Trajectory([c]), small_model, e0=0.0)
    with pytest.raises(MissingInitialEnergy):
        taylor_energy_series(Trajectory([c, c]), small_model)
    with pytest.raises(TooShort):
        sample_indices(1)


def test_sample_indices():
    assert sample_indices(9, 8).tolist() == list(range(9))
    assert sample_indices(17, 8).tolist() == list(range(0, 17, 2))
    assert sample_indices(3, 8).tolist() == [0, 1, 2]
    idx = sample_indices(1000, 8)
    assert idx[0] == 0 and idx[-1] == 999 and len(idx) == 9


def test_fit_recovers_affine_map():
    e = np.linspace(-5.0, 3.0, 9)
    cal = fit_linear(2.0 * e + 5.0, e)
    assert cal.w == pytest.approx(0.5, abs=1e-8)
    assert cal.b == pytest.approx(-2.5, abs=1e-8)
    assert cal.fit_residual_mae <= 1e-10
    ident = fit_linear(e, e)
    assert ident.w == pytest.approx(1.0, abs=1e-12) and ident.b == pytest.approx(0.0, abs=1e-12)


@given(
    st.floats(-20, 20).filter(lambda w: abs(w) > 1e-3),
    st.floats(-100, 100),
    st.integers(0, 2**31),
)
def test_fit_exact_affine_property(w, b, seed):
    phi = np.random.default_rng(seed).uniform(-10, 10, 12)
    cal = fit_linear(phi, w * phi + b)
    assert cal.fit_residual_mae <= 1e-10 * max(1.0, abs(b), abs(w) * 10)
    assert cal.w == pytest.approx(w, rel=1e-9, abs=1e-9)


def test_fit_with_noise():
    gen = np.random.default_rng(0)
    e = gen.uniform(-1, 1, 200)
    phi = 2.0 * e + gen.normal(0, 0.05, 200)
    assert 0.45 <= fit_linear(phi, e).w <= 0.55


def test_fit_subsamples():
    phi = np.arange(100.0)
    e = 3.0 * phi
    e[5] = 1e6  # not among the 9 sampled indices
    cal = fit_linear(phi, e, m=8)
    assert cal.w == pytest.approx(3.0, rel=1e-12)


def test_degenerate_fit():
    with pytest.raises(DegenerateFit):
        fit_linear([1.0], [2.0])
    with pytest.raises(DegenerateFit):
        fit_linear([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])
    with pytest.raises(ValueError):
        fit_linear([1.0, 2.0], [1.0])


@given(st.floats(-1e3, 1e3), st.floats(-10, 10))
def test_apply(phi, delta):
    assert CalibrationModel(1.0, 0.0).apply(phi) == phi
    base = CalibrationModel(0.7, 1.5)
    shifted = CalibrationModel(0.7, 1.5 + delta)
    assert shifted.apply(phi) - base.apply(phi) == pytest.approx(delta, abs=1e-9)


def test_json_round_trip(tmp_path):
    cal = CalibrationModel(0.123456789012345, -7.5, 1e-3)
    assert CalibrationModel.from_json(cal.to_json()) == cal
    cal.save(tmp_path / "c.json")
    assert CalibrationModel.load(tmp_path / "c.json") == cal
    with pytest.raises(ValueError):
        CalibrationModel(float("nan"), 0.0)


def test_self_calibration_is_identity(chain9, small_model):
    traj = generate_reference_trajectory(chain9, 300.0, 400, 0.02, seed=3)
    e0 = predict_energy(traj[0], small_model)
    cal = calibrate_trajectory(traj, small_model, e0=e0)
    assert cal.w == pytest.approx(1.0, abs=0.02)
    c = traj[200]
    assert calibrated_energy(c, small_model, cal) == pytest.approx(predict_energy(c, small_model), abs=0.02)


def test_calibrated_energy_matches_apply(chain6, small_model):
    c = Conformation(chain6.positions, chain6.species)
    cal = CalibrationModel(2.0, -1.0)
    assert calibrated_energy(c, small_model, cal) == 2.0 * predict_energy(c, small_model) - 1.0
