import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import ndtri
from scipy.stats import wasserstein_distance

from corrlab.environment import ConductanceLaw
from corrlab.errors import DegenerateDistribution, PreconditionError
from corrlab.field import TestFunction
from corrlab.lattice import LatticeShape
from corrlab.stats import (
    SampleSet,
    bootstrap,
    cauchy_check,
    mc_campaign,
    moment_scan,
    noise_floor,
    rate_fit,
    rate_predictor,
    summarize,
    wasserstein1_to_gaussian,
)

LAW = ConductanceLaw(1.0, 4.0)
F3 = TestFunction("mollifier_bump", 3)
SHAPE = LatticeShape(3, 16)

# reference quantile grid for scipy's empirical W1 (an independent estimator)
_REF = ndtri((np.arange(1, 400_001) - 0.5) / 400_000)


def w1_rows(X):
    return np.array([wasserstein1_to_gaussian(row, normalize=False) for row in X])


def test_quantile_construction_distance():
    n = 10**4
    x = ndtri((np.arange(1, n + 1) - 0.5) / n)
    val = wasserstein1_to_gaussian(x, normalize=False)
    # scipy with a 4M-point quantile reference gives 2.182853e-4
    assert val == pytest.approx(2.182853e-4, rel=5e-4)
    assert val <= 2.2e-4


@settings(max_examples=30)
@given(st.integers(0, 10**6), st.integers(5, 300), st.floats(-1, 1), st.floats(0.3, 3))
def test_exact_w1_matches_scipy(seed, n, shift, scale):
    x = shift + scale * np.random.default_rng(seed).standard_normal(n)
    assert wasserstein1_to_gaussian(x, normalize=False) == pytest.approx(wasserstein_distance(x, _REF), abs=2e-5)


def test_shift_distance_within_bootstrap_ci():
    y = np.random.default_rng(0).standard_normal(10**4) + 0.5
    est, (lo, hi) = bootstrap(y, w1_rows, 200, 0)
    assert lo <= 0.5 <= hi
    assert abs(est - 0.5) < 0.02


def test_w1_deterministic_and_invariant():
    x = np.random.default_rng(4).standard_normal(50)
    assert wasserstein1_to_gaussian(x) == wasserstein1_to_gaussian(x.copy())
    # studentization removes location and scale
    assert wasserstein1_to_gaussian(3 * x + 7) == pytest.approx(wasserstein1_to_gaussian(x), abs=1e-12)
    with pytest.raises(DegenerateDistribution):
        wasserstein1_to_gaussian(np.ones(10))


def test_noise_floor_shrinks_like_root_n():
    f50, f200 = noise_floor(50), noise_floor(200)
    assert f200 < f50
    assert 1.5 < f50 / f200 < 2.6


def test_bootstrap_interval_contains_estimate():
    x = np.random.default_rng(1).exponential(size=40)
    est, (lo, hi) = bootstrap(x, lambda X: X.mean(axis=1), 300, 2)
    assert lo <= est <= hi
    assert est == pytest.approx(x.mean())


def test_rate_fit_exact_model():
    eps = np.array([1 / 4, 1 / 8, 1 / 16, 1 / 32])
    fit = rate_fit(eps, 0.7 * rate_predictor(eps, 3), 3)
    assert fit.slope == pytest.approx(1.0, abs=1e-12)
    assert fit.r2 == pytest.approx(1.0, abs=1e-12)
    assert fit.intercept == pytest.approx(math.log(0.7), abs=1e-12)


def test_rate_fit_detects_mismatch():
    eps = np.array([1 / 4, 1 / 8, 1 / 16, 1 / 32])
    fit = rate_fit(eps, 0.3 * eps, 3)
    x = np.log(rate_predictor(eps, 3))
    y = np.log(0.3 * eps)
    ols = np.polyfit(x, y, 1)[0]
    assert fit.slope == pytest.approx(ols, rel=1e-12)
    # eps and eps^1.5 |log eps| differ in curvature: slope off 1 and an imperfect fit
    assert abs(fit.slope - 1) > 0.05
    assert fit.r2 < 1 - 1e-4


@given(st.permutations(range(4)))
def test_rate_fit_order_invariant(perm):
    eps = np.array([1 / 4, 1 / 8, 1 / 16, 1 / 32])
    dK = np.array([0.2, 0.09, 0.05, 0.018])
    base = rate_fit(eps, dK)
    p = np.array(perm)
    other = rate_fit(eps[p], dK[p])
    assert other.slope == base.slope and other.mask == base.mask


def test_rate_fit_masks_noise_floor():
    eps = [1 / 4, 1 / 8, 1 / 16, 1 / 32]
    fit = rate_fit(eps, [0.2, 0.1, 0.05, 0.02], 3, floor=0.08)
    assert fit.status == "inconclusive"
    assert fit.mask == [True, True, False, False]
    assert math.isnan(fit.slope)


def test_sample_set_guards():
    with pytest.raises(PreconditionError):
        SampleSet(np.array([1.0]), 0.1, 1.0, {}, np.array([0]))


def test_constant_law_degenerate():
    camp = mc_campaign(SHAPE, ConductanceLaw(2.0, 2.0), [1, 0, 0], F3, [1 / 4], 4)
    s = camp.sample_set(0.25)
    assert not np.any(s.values)
    rep = summarize(s, 50)
    assert rep.degenerate and rep.sigma_eps == 0 and rep.variance_bound == 0.0
    rows = moment_scan(camp, [2, 4], n_boot=20)
    assert all(r.moment == 0 for r in rows)


@pytest.fixture(scope="module")
def campaign64():
    return mc_campaign(LatticeShape(3, 24), LAW, [1, 0, 0], F3, [1 / 4, 1 / 8], 64, (1.0, 0.5), master_seed=3)


def test_mean_zero(campaign64):
    for key, s in campaign64.samples.items():
        se = s.values.std(ddof=1) / math.sqrt(s.n)
        assert abs(s.values.mean()) <= 4 * se


def test_more_replicas_consistent(campaign64):
    small = mc_campaign(LatticeShape(3, 24), LAW, [1, 0, 0], F3, [1 / 4], 32, master_seed=3)
    a = summarize(small.sample_set(0.25), 300)
    b = summarize(campaign64.sample_set(0.25), 300)
    assert a.sigma_eps_ci[0] <= b.sigma_eps_ci[1] and b.sigma_eps_ci[0] <= a.sigma_eps_ci[1]
    # the first 32 samples are the same replicas
    np.testing.assert_array_equal(small.sample_set(0.25).values, campaign64.sample_set(0.25).values[:32])


def test_moment_scan_identities(campaign64):
    rows = moment_scan(campaign64, [2, 4], n_boot=50)
    get = {(r.eps, r.lam, r.p): r for r in rows}
    # normalized moment at (eps, lam) is the raw moment at eps / lam
    for p in (2, 4):
        assert get[(0.125, 0.5, p)].normalized == pytest.approx(get[(0.25, 1.0, p)].moment, rel=1e-12)
    x = campaign64.sample_set(0.25).values
    n = len(x)
    assert get[(0.25, 1.0, 2)].moment ** 2 == pytest.approx((n - 1) / n * x.var(ddof=1) + x.mean() ** 2, rel=1e-12)
    with pytest.raises(PreconditionError):
        moment_scan(campaign64, [2.5])


def test_odd_moments_flagged(campaign64):
    rows = moment_scan(campaign64, [3], n_boot=20)
    assert all(r.odd for r in rows)


def test_campaign_thread_independent():
    a = mc_campaign(SHAPE, LAW, [1, 0, 0], F3, [1 / 4], 6, covariance_window=3)
    b = mc_campaign(SHAPE, LAW, [1, 0, 0], F3, [1 / 4], 6, covariance_window=3, threads=3)
    assert a.sample_set(0.25).values.tobytes() == b.sample_set(0.25).values.tobytes()
    assert a.covariance.c_hat.tobytes() == b.covariance.c_hat.tobytes()


def test_cauchy_check():
    class R:
        def __init__(self, eps, v, h):
            self.eps, self.var_eps, self.var_eps_ci = eps, v, (v - h, v + h)

    good = [R(0.25, 1.0, 0.01), R(0.125, 1.5, 0.01), R(0.0625, 1.7, 0.01), R(0.03125, 1.75, 0.01)]
    assert cauchy_check(good)["passed"]
    bad = [R(0.25, 1.0, 0.01), R(0.125, 1.1, 0.01), R(0.0625, 1.7, 0.01)]
    assert not cauchy_check(bad)["passed"]
    assert cauchy_check(bad, widen=30.0)["passed"]
