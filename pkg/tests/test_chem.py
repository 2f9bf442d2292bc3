import pickle

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import random_rotation
from forcekit.chem import (
    ELEMENTS,
    FORCE_TO_ACCEL,
    KB,
    UNITS,
    AtomSpec,
    Conformation,
    ElementTable,
    Trajectory,
    interatomic_distance_matrix,
    validate_conformation,
)
from forcekit.errors import EmptyTrajectory, InconsistentSpecies, NonFiniteCoordinate, ShapeMismatch


def test_constants():
    assert KB == 8.617333262e-5
    assert FORCE_TO_ACCEL == 9.64853e-3
    with pytest.raises(AttributeError):
        UNITS.k_b = 1.0


def test_element_table():
    assert [ELEMENTS.id_of(s) for s in "HCO"] == [0, 1, 2]
    assert ELEMENTS.symbol_of(2) == "O"
    np.testing.assert_array_equal(ELEMENTS.masses([1, 0]), [12.011, 1.008])
    bigger = ELEMENTS.extend("N", 14.007)
    assert bigger.id_of("N") == 3 and bigger.id_of("O") == 2
    assert len(ELEMENTS) == 3
    with pytest.raises(KeyError):
        ELEMENTS.id_of("Xe")
    with pytest.raises(ValueError):
        ElementTable([("H", 1.0), ("H", 2.0)])
    with pytest.raises(ValueError):
        AtomSpec("X", 0, 0.0)


def test_validate_ok():
    c = Conformation(np.eye(3), [0, 1, 2])
    assert validate_conformation(c) is c


def test_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        Conformation(np.zeros((2, 3)), [0, 1, 2])
    with pytest.raises(ShapeMismatch):
        Conformation(np.zeros((2, 3)), [0, 1], ref_forces=np.zeros((3, 3)))
    with pytest.raises(ShapeMismatch):
        Conformation(np.zeros((2, 2)), [0, 1])


def test_non_finite():
    pos = np.zeros((3, 3))
    pos[1, 2] = np.nan
    with pytest.raises(NonFiniteCoordinate):
        Conformation(pos, [0, 0, 0])


def test_immutable_and_picklable():
    c = Conformation(np.eye(3), [0, 1, 2], 1.5, np.ones((3, 3)), {"step": 4})
    with pytest.raises(ValueError):
        c.positions[0, 0] = 5.0
    with pytest.raises(TypeError):
        c.info["step"] = 3
    d = pickle.loads(pickle.dumps(c))
    np.testing.assert_array_equal(d.positions, c.positions)
    assert d.ref_energy == 1.5 and d.info["step"] == 4
    e = c.replace(ref_energy=2.0)
    assert e.ref_energy == 2.0 and c.ref_energy == 1.5


def test_distance_examples():
    d = interatomic_distance_matrix(Conformation([[0, 0, 0], [3, 4, 0]], [0, 0]))
    assert d[0, 1] == d[1, 0] == 5.0
    np.testing.assert_array_equal(interatomic_distance_matrix(Conformation([[1, 2, 3]], [0])), [[0.0]])
    d = interatomic_distance_matrix(Conformation([[0, 0, 0], [1, 0, 0], [2, 0, 0]], [0, 0, 0]))
    np.testing.assert_array_equal(d, [[0, 1, 2], [1, 0, 1], [2, 1, 0]])


coords = arrays(np.float64, st.tuples(st.integers(1, 8), st.just(3)), elements=st.floats(-10, 10))


@given(coords, st.integers(0, 2**32 - 1))
def test_distance_properties(pos, seed):
    c = Conformation(pos, np.zeros(len(pos), dtype=int))
    d = interatomic_distance_matrix(c)
    assert np.array_equal(d, d.T)
    assert np.all(np.diag(d) == 0)
    rng = np.random.default_rng(seed)
    moved = pos @ random_rotation(rng).T + rng.uniform(-5, 5, 3)
    d2 = interatomic_distance_matrix(Conformation(moved, c.species))
    np.testing.assert_allclose(d2, d, rtol=1e-10, atol=1e-10 * max(1.0, d.max()))


def test_trajectory_invariants():
    a = Conformation(np.eye(3), [0, 1, 2])
    b = Conformation(np.eye(3) * 2, [0, 1, 2])
    t = Trajectory([a, b], 0.5, "oracle")
    assert len(t) == 2 and t[1] is b
    assert t.positions().shape == (2, 3, 3)
    with pytest.raises(EmptyTrajectory):
        Trajectory([])
    with pytest.raises(InconsistentSpecies):
        Trajectory([a, Conformation(np.eye(3), [0, 0, 2])])
