import numpy as np
import pytest

from survsurrogate.diagnostics import check_conditions, default_grid, joint_tail
from survsurrogate.errors import GridOutsideSupport
from survsurrogate.simulation import generate_study
from survsurrogate.study_data import StudyData


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_setting1_flags_c1_then_passes_on_reciprocal(seed):
    data = generate_study("setting1", 1000, np.random.default_rng(seed))
    raw = check_conditions(data)
    assert raw.verdict == "warn" and raw.violations["C1"] > 0
    assert any("surrogate paradox" in m for m in raw.messages)
    flipped = check_conditions(data, reciprocal=True)
    assert flipped.verdict == "pass", flipped.violations


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_identical_laws_pass_c3(seed):
    data = generate_study("null", 1000, np.random.default_rng(seed))
    rep = check_conditions(data, reciprocal=True)
    assert rep.violations["C3"] == 0 and rep.verdict == "pass"


def test_same_records_no_c2_or_c3():
    data = generate_study("setting1", 600, np.random.default_rng(4))
    twin = StudyData(data.arm_a, data.arm_a, data.t0, data.t)
    rep = check_conditions(twin, reciprocal=True)
    assert rep.violations["C2"] == 0 and rep.violations["C3"] == 0
    np.testing.assert_array_equal(rep.psi_a, rep.psi_b)


def test_grid_outside_support():
    data = generate_study("setting1", 300, np.random.default_rng(5))
    with pytest.raises(GridOutsideSupport):
        check_conditions(data, grid=[1e-6, 1.0])


def test_default_grid_is_pooled_quantiles():
    data = generate_study("setting1", 300, np.random.default_rng(6))
    grid = default_grid(data)
    pooled = np.concatenate([a.surrogate[~np.isnan(a.surrogate)] for _, a in data.arms()])
    assert grid.size == 101
    assert grid[0] == np.quantile(pooled, 0.01) and grid[-1] == np.quantile(pooled, 0.99)


def test_joint_tail_without_censoring_is_empirical():
    data = generate_study("setting1", 300, np.random.default_rng(7))
    arm = data.arm_a
    grid = np.array([1.0, 3.0, 6.0])
    tail = joint_tail(arm, data.t0, grid)
    assert np.all(np.diff(tail) <= 0)
    assert np.all((tail >= 0) & (tail <= 1.0 / 0.5))
