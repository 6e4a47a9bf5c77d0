import json
import math
import warnings

import numpy as np
import pytest
from scipy import stats

from survsurrogate.errors import InferenceAborted, SingularCovarianceWarning, TooFewDraws, UnstableRatioWarning
from survsurrogate.inference import (
    augment,
    ci_fieller,
    ci_normal,
    ci_quantile,
    covariance,
    infer,
    perturb,
    variance,
)
from survsurrogate.simulation import generate_study, jsonable
from survsurrogate.study_data import Arm, StudyData


@pytest.fixture(scope="module")
def study():
    return generate_study("setting1", 400, np.random.default_rng(21))


def normal_draws(num, den, sigma, size=4000, seed=0):
    x = np.random.default_rng(seed).multivariate_normal([num, den], sigma, size=size)
    return x[:, 0], x[:, 1]


def test_normal_interval_symmetric():
    lo, hi = ci_normal(0.3, 0.1, 0.05)
    assert (lo + hi) / 2 == pytest.approx(0.3)
    assert hi - lo == pytest.approx(2 * stats.norm.ppf(0.975) * 0.1)
    assert ci_normal(0.3, 0.0) == (0.3, 0.3)


def test_quantile_endpoints_are_draws(rng):
    x = rng.standard_normal(537)
    lo, hi = ci_quantile(x, 0.05)
    assert lo in x and hi in x
    assert lo < hi


def test_fieller_bounded_interval():
    sigma = np.array([[1e-4, 2e-5], [2e-5, 4e-4]])
    dn, dd = normal_draws(0.05, 0.2, sigma)
    fs = ci_fieller(0.05, 0.2, dn, dd, sigma)
    assert fs.kind == "interval"
    assert fs.lower < 0.75 < fs.upper
    assert fs.c_alpha == pytest.approx(stats.chi2.ppf(0.95, 1), rel=0.1)


def test_fieller_complement():
    sigma = np.diag([4e-4, 4e-4])
    dn, dd = normal_draws(0.05, 0.01, sigma)
    fs = ci_fieller(0.05, 0.01, dn, dd, sigma)
    assert fs.kind == "complement"
    assert fs.contains(1 - 0.05 / 0.01)
    assert not fs.contains((fs.lower + fs.upper) / 2)
    assert "U" in fs.describe()


def test_fieller_whole_line():
    sigma = np.diag([4e-4, 4e-4])
    dn, dd = normal_draws(0.0, 0.0, sigma)
    fs = ci_fieller(0.001, 0.0005, dn, dd, sigma)
    assert fs.kind == "whole_line"
    assert fs.contains(-1e9) and fs.contains(1e9)
    d = fs.to_dict()
    assert d["kind"] == "whole_line" and d["lower"] is None and d["upper"] is None


def test_fieller_zero_scale_is_point():
    fs = ci_fieller(0.05, 0.2, np.full(50, 0.05), np.full(50, 0.2), np.zeros((2, 2)))
    assert fs.kind == "interval" and fs.lower == fs.upper == pytest.approx(0.75)


def test_fieller_contains_point_estimate(rng):
    for _ in range(50):
        num, den = rng.uniform(-0.3, 0.3, 2)
        a = rng.standard_normal((2, 2)) * 0.05
        sigma = a @ a.T
        dn, dd = normal_draws(num, den, sigma, size=300, seed=int(rng.integers(1 << 30)))
        fs = ci_fieller(num, den, dn, dd, sigma)
        if fs.c_alpha > 0:
            assert fs.contains(1 - num / den)


def test_covariance_constant_draws():
    assert covariance(np.full((40, 2), 0.3)).tolist() == [[0, 0], [0, 0]]
    assert covariance(np.full(40, 0.3), "robust")[0, 0] == 0


def test_robust_resists_outlier(rng):
    x = rng.standard_normal(500)
    dirty = x.copy()
    dirty[0] = 1e3
    robust_clean = math.sqrt(covariance(x, "robust")[0, 0])
    robust_dirty = math.sqrt(covariance(dirty, "robust")[0, 0])
    assert robust_dirty == pytest.approx(robust_clean, rel=0.05)
    assert math.sqrt(covariance(dirty)[0, 0]) > 10 * math.sqrt(covariance(x)[0, 0])


def test_robust_keeps_correlation(rng):
    x = rng.multivariate_normal([0, 0], [[1, 0.6], [0.6, 1]], size=2000)
    r = covariance(x, "robust")
    assert r[0, 1] / math.sqrt(r[0, 0] * r[1, 1]) == pytest.approx(np.corrcoef(x.T)[0, 1], abs=1e-12)


def test_too_few_draws():
    with pytest.raises(TooFewDraws):
        covariance(np.zeros(29))


def test_unit_weights_give_point_estimate(study):
    draws = perturb(study, D=40, seed=1, weight_sampler=lambda rng, size: np.ones(size))
    p = draws.point.values()
    for name, vals in draws.values.items():
        assert np.all(vals == p[name])
    report = infer(study, D=40, seed=1, weight_sampler=lambda rng, size: np.ones(size))
    for name in ("delta", "r_s"):
        assert report.ci[name]["quantile"] == (p[name], p[name])
        assert report.ci[name]["normal"] == (p[name], p[name])
    assert report.ci["r_s"]["fieller"].lower == pytest.approx(p["r_s"])


def test_determinism(study):
    a = infer(study, D=60, seed=99, augment_covariates=["z1"]).to_dict()
    b = infer(study, D=60, seed=99, augment_covariates=["z1"]).to_dict()
    assert json.dumps(jsonable(a), sort_keys=True) == json.dumps(jsonable(b), sort_keys=True)
    c = infer(study, D=60, seed=100).to_dict()
    assert c["se"] != a["se"]


def test_draws_keyed_by_index(study):
    small = perturb(study, D=30, seed=5)
    large = perturb(study, D=60, seed=5)
    np.testing.assert_array_equal(small.values["delta"], large.values["delta"][:30])


def nan_sampler(fraction):
    def sampler(rng, size):
        w = rng.standard_exponential(size)
        return np.full(size, np.nan) if rng.random() < fraction else w

    return sampler


def test_failed_draws_counted(study):
    draws = perturb(study, D=400, seed=3, weight_sampler=nan_sampler(0.005), max_failed_fraction=0.02)
    assert 0 < draws.n_failed <= 8
    sigma, se = variance(draws)
    assert np.all(np.isfinite(sigma)) and math.isfinite(se["r_s"])


def test_too_many_failed_draws_abort(study):
    with pytest.raises(InferenceAborted, match="more than 2%"):
        perturb(study, D=200, seed=3, weight_sampler=nan_sampler(0.2))


def test_rejects_nonpositive_weights(study):
    with pytest.raises(ValueError, match="positive"):
        perturb(study, D=30, seed=3, weight_sampler=lambda rng, size: -np.ones(size))


def test_report_layout(study):
    d = infer(study, D=50, seed=2, mode="robust").to_dict()
    assert d["variance_mode"] == "robust"
    assert d["bandwidth_fixed_across_draws"] is True
    assert set(d["ci"]["r_s"]) == {"normal", "quantile", "fieller"}
    assert set(d["ci"]["delta"]) == {"normal", "quantile"}
    assert np.array(d["sigma_delta_s_delta"]).shape == (2, 2)


def with_noise_covariate(data, seed):
    rng = np.random.default_rng(seed)
    arms = [
        Arm.from_arrays(arm.time, arm.event, arm.surrogate, np.column_stack([arm.covariates, rng.standard_normal(arm.n)]))
        for _, arm in data.arms()
    ]
    return StudyData(arms[0], arms[1], data.t0, data.t, (*data.covariate_names, "noise"))


def test_augmenting_with_noise_changes_little(study):
    data = with_noise_covariate(study, 4)
    rep = infer(data, D=300, seed=8, augment_covariates=["noise"])
    for name in ("delta", "delta_s", "r_s"):
        assert abs(rep.augmented.point.values()[name] - rep.point.values()[name]) < 0.5 * rep.se[name]
        assert rep.augmented.se[name] <= 1.05 * rep.se[name]


def test_augmenting_with_prognostic_covariate_shrinks_se():
    data = generate_study("setting2", 1000, np.random.default_rng(17))
    rep = infer(data, D=400, seed=8, augment_covariates=["z1"])
    assert rep.augmented.se["delta"] < rep.se["delta"]
    assert rep.to_dict()["augmented"]["covariates"] == ["z1"]


def test_singular_contrast_gets_ridge(study):
    draws = perturb(study, D=80, seed=2)
    za = np.column_stack([study.arm_a.covariates[:, 0]] * 2)
    zb = np.column_stack([study.arm_b.covariates[:, 0]] * 2)
    with pytest.warns(SingularCovarianceWarning):
        point, values, info = augment(draws, za, zb)
    assert info["ridge"] > 0
    assert np.isfinite(point.delta)


def test_null_fieller_sets_reported():
    data = generate_study("null", 1000, np.random.default_rng(31))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UnstableRatioWarning)
        rep = infer(data, D=300, seed=4)
    fs = rep.ci["r_s"]["fieller"]
    assert fs.kind in {"interval", "complement", "whole_line", "half_line", "empty"}
    assert rep.to_dict()["ci"]["r_s"]["fieller"]["kind"] == fs.kind


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_r_s_within_unit_interval_under_conditions(seed):
    # the DPP-shaped generator satisfies the three monotonicity conditions
    data = generate_study("dpp", 1000, np.random.default_rng(seed))
    rep = infer(data, D=200, seed=seed)
    r, se = rep.point.r_s, rep.se["r_s"]
    assert -3 * se <= r <= 1 + 3 * se
