"""Monte Carlo campaigns and the statistics of the rescaled field.

Distances to the standard Gaussian are computed as the L1 distance between the
empirical CDF and the normal CDF, exactly from the order statistics.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import stats as sps
from scipy.special import ndtr, ndtri

from .corrector import solve_corrector
from .environment import ConductanceLaw, SeedSpec, sample_environment
from .errors import ConvergenceError, DegenerateDistribution, PreconditionError
from .field import CovarianceAccumulator, TestFunction, check_admissible, field_weights
from .lattice import LatticeShape
from .solver import SolverConfig

# stream tag separating bootstrap / null-simulation draws from environment drivers
BOOTSTRAP_TAG = 2**62
NULL_TAG = 2**62 + 1


def stat_rng(seed: int, tag: int = BOOTSTRAP_TAG) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=np.array([seed, tag], dtype=np.uint64)))


@dataclass
class SampleSet:
    values: np.ndarray
    eps: float
    lam: float
    f_desc: dict
    replica_indices: np.ndarray
    master_seed: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.replica_indices = np.asarray(self.replica_indices, dtype=int)
        if self.values.ndim != 1 or len(self.values) < 2:
            raise PreconditionError("a sample set needs at least 2 values")
        if len(self.replica_indices) != len(self.values):
            raise PreconditionError("one replica index per value")

    @property
    def n(self) -> int:
        return len(self.values)


def _psi(t):
    """Antiderivative of the normal CDF vanishing at -infinity."""
    return t * ndtr(t) + np.exp(-0.5 * t * t) / math.sqrt(2 * math.pi)


def _w1_sorted(x: np.ndarray) -> np.ndarray:
    """int |F_n - Phi| over rows of sorted samples ``x`` (shape (..., n))."""
    n = x.shape[-1]
    left = _psi(x[..., 0])
    right = _psi(-x[..., -1])
    a = x[..., :-1]
    b = x[..., 1:]
    c = np.arange(1, n) / n
    q = np.clip(ndtri(c), a, b)
    psi_a, psi_b, psi_q = _psi(a), _psi(b), _psi(q)
    # F_n = c on [a, b): Phi < c left of q, Phi > c right of q
    below = c * (q - a) - (psi_q - psi_a)
    above = (psi_b - psi_q) - c * (b - q)
    return left + right + np.sum(below + above, axis=-1)


def wasserstein1_to_gaussian(samples, normalize: bool = True) -> float:
    """W1 distance between the (optionally studentized) sample law and N(0, 1)."""
    x = np.asarray(samples.values if isinstance(samples, SampleSet) else samples, dtype=float)
    if x.size < 2:
        raise PreconditionError("need at least 2 samples")
    if normalize:
        sd = x.std(ddof=1)
        if not sd > 0:
            raise DegenerateDistribution("zero sample variance; studentization undefined")
        x = (x - x.mean()) / sd
    return float(_w1_sorted(np.sort(x)))


def _w1_rows(x: np.ndarray) -> np.ndarray:
    sd = x.std(axis=1, ddof=1, keepdims=True)
    sd = np.where(sd > 0, sd, 1.0)
    return _w1_sorted(np.sort((x - x.mean(axis=1, keepdims=True)) / sd, axis=1))


@lru_cache(maxsize=64)
def noise_floor(n: int, level: float = 0.95, n_sim: int = 400, seed: int = 0) -> float:
    """Quantile of the studentized W1 distance for n exact Gaussian samples."""
    rng = stat_rng(seed, NULL_TAG)
    out = []
    for start in range(0, n_sim, 50):
        out.append(_w1_rows(rng.standard_normal((min(50, n_sim - start), n))))
    return float(np.quantile(np.concatenate(out), level))


def bootstrap(values, stat, n_boot: int = 1000, seed: int = 0, level: float = 0.95, chunk: int = 100):
    """Percentile interval of ``stat`` (applied row-wise) over resamples, widened to hold the estimate."""
    x = np.asarray(values, dtype=float)
    est = float(stat(x[None, :])[0])
    rng = stat_rng(seed)
    reps = []
    for start in range(0, n_boot, chunk):
        idx = rng.integers(0, len(x), size=(min(chunk, n_boot - start), len(x)))
        reps.append(stat(x[idx]))
    reps = np.concatenate(reps)
    alpha = 0.5 * (1 - level)
    lo, hi = np.quantile(reps, [alpha, 1 - alpha])
    return est, (float(min(lo, est)), float(max(hi, est)))


def _sd_rows(x):
    return x.std(axis=1, ddof=1)


@dataclass
class StatsReport:
    eps: float
    lam: float
    n: int
    mean: float
    mean_stderr: float
    sigma_eps: float
    sigma_eps_ci: tuple
    dK: float
    dK_ci: tuple
    noise_floor: float
    degenerate: bool = False
    # in the degenerate branch dK is replaced by the bound sqrt(sample variance)
    variance_bound: float | None = None

    @property
    def var_eps(self) -> float:
        return self.sigma_eps**2

    @property
    def var_eps_ci(self) -> tuple:
        return (self.sigma_eps_ci[0] ** 2, self.sigma_eps_ci[1] ** 2)

    def csv_row(self) -> list:
        return [self.eps, self.n, self.sigma_eps, *self.sigma_eps_ci, self.dK, *self.dK_ci]

    def to_dict(self) -> dict:
        return {
            "eps": self.eps,
            "lambda": self.lam,
            "n": self.n,
            "mean": self.mean,
            "mean_stderr": self.mean_stderr,
            "sigma_eps": self.sigma_eps,
            "sigma_eps_ci": list(self.sigma_eps_ci),
            "dK": self.dK,
            "dK_ci": list(self.dK_ci),
            "noise_floor": self.noise_floor,
            "degenerate": self.degenerate,
            "variance_bound": self.variance_bound,
        }


STATS_CSV_HEADER = ["eps", "n", "sigma_eps", "sigma_eps_lo", "sigma_eps_hi", "dK", "dK_lo", "dK_hi"]


def summarize(samples: SampleSet, n_boot: int = 1000, seed: int = 0) -> StatsReport:
    x = samples.values
    n = samples.n
    sd = float(x.std(ddof=1))
    mean = float(x.mean())
    if sd == 0.0:
        # sigma(f) = 0 branch: the distance is bounded by sqrt(Var)
        return StatsReport(
            samples.eps, samples.lam, n, mean, 0.0, 0.0, (0.0, 0.0), 0.0, (0.0, 0.0), 0.0, True, 0.0
        )
    sigma, sigma_ci = bootstrap(x, _sd_rows, n_boot, seed)
    dK, dK_ci = bootstrap(x, _w1_rows, n_boot, seed + 1)
    return StatsReport(
        samples.eps, samples.lam, n, mean, sd / math.sqrt(n), sigma, sigma_ci, dK, dK_ci, noise_floor(n)
    )


# ----------------------------------------------------------------------------
# Rate fits


@dataclass
class RateFit:
    eps_grid: list
    dK_values: list
    slope: float
    intercept: float
    r2: float
    slope_ci: tuple = (math.nan, math.nan)
    mask: list = field(default_factory=list)
    status: str = "ok"
    d: int = 3

    def to_dict(self) -> dict:
        return {
            "eps_grid": list(self.eps_grid),
            "dK_values": list(self.dK_values),
            "mask": list(self.mask),
            "slope": self.slope,
            "slope_ci": list(self.slope_ci),
            "intercept": self.intercept,
            "r2": self.r2,
            "status": self.status,
            "predictor": f"eps^{self.d}/2 |log eps|",
        }


def rate_predictor(eps, d: int) -> np.ndarray:
    eps = np.asarray(eps, dtype=float)
    return eps ** (d / 2) * np.abs(np.log(eps))


def rate_fit(eps, dK, d: int = 3, floor=None, level: float = 0.95) -> RateFit:
    """OLS of log dK on log(eps^(d/2) |log eps|) over the points above the noise floor."""
    eps = np.asarray(eps, dtype=float)
    dK = np.asarray(dK, dtype=float)
    if eps.shape != dK.shape:
        raise PreconditionError("eps and dK must have equal length")
    if np.any((eps <= 0) | (eps >= 1)):
        raise PreconditionError("rate fit needs eps in (0, 1)")
    order = np.argsort(-eps, kind="stable")
    eps, dK = eps[order], dK[order]
    if floor is None:
        mask = dK > 0
    else:
        floor = np.broadcast_to(np.asarray(floor, dtype=float), eps.shape)[order]
        mask = (dK > floor) & (dK > 0)
    grid, vals = eps.tolist(), dK.tolist()
    if mask.sum() < 3:
        return RateFit(grid, vals, math.nan, math.nan, math.nan, (math.nan, math.nan), mask.tolist(), "inconclusive", d)
    x = np.log(rate_predictor(eps[mask], d))
    y = np.log(dK[mask])
    res = sps.linregress(x, y)
    m = int(mask.sum())
    if m > 2:
        t = sps.t.ppf(0.5 + level / 2, m - 2)
        ci = (res.slope - t * res.stderr, res.slope + t * res.stderr)
    else:  # pragma: no cover - excluded above
        ci = (math.nan, math.nan)
    return RateFit(grid, vals, float(res.slope), float(res.intercept), float(res.rvalue**2), ci, mask.tolist(), "ok", d)


# ----------------------------------------------------------------------------
# Campaigns


@dataclass
class Campaign:
    shape: LatticeShape
    law: ConductanceLaw
    xi: np.ndarray
    f: TestFunction
    master_seed: int
    samples: dict  # (eps, lam) -> SampleSet
    covariance: object = None
    solve_iterations: list = field(default_factory=list)

    @property
    def eps_list(self):
        return sorted({k[0] for k in self.samples}, reverse=True)

    @property
    def lam_list(self):
        return sorted({k[1] for k in self.samples}, reverse=True)

    def sample_set(self, eps, lam=1.0) -> SampleSet:
        return self.samples[(eps, lam)]

    def reports(self, lam=1.0, n_boot=1000, seed=0) -> list:
        return [summarize(self.samples[(e, lam)], n_boot, seed) for e in self.eps_list if (e, lam) in self.samples]


def mc_campaign(
    shape: LatticeShape,
    law: ConductanceLaw,
    xi,
    f: TestFunction,
    eps_list,
    n_replicas: int,
    lam_list=(1.0,),
    master_seed: int = 0,
    cfg: SolverConfig | None = None,
    threads: int = 1,
    first_replica: int = 0,
    covariance_window: int | None = None,
) -> Campaign:
    """Sample Phi_eps(f_lam) over replicas, reusing one corrector per replica for the whole grid.

    With ``covariance_window`` the spatial autocorrelation of the corrector is
    accumulated as well (replicas are merged in index order).
    """
    if n_replicas < 2:
        raise PreconditionError("a campaign needs at least 2 replicas")
    xi = np.asarray(xi, dtype=float)
    pairs = [(float(e), float(l)) for l in lam_list for e in eps_list]
    for e, l in pairs:
        check_admissible(shape, l, e)
    weights = {p: field_weights(shape, f, p[1], p[0]) for p in pairs}
    acc = CovarianceAccumulator(shape, covariance_window) if covariance_window is not None else None

    def one(r):
        env = sample_environment(shape, law, SeedSpec(master_seed, r))
        try:
            sol = solve_corrector(env, xi, 0.0, cfg)
        except ConvergenceError as err:
            raise ConvergenceError(f"replica {r}: {err}", err.report) from err
        vals = {p: float(np.sum(w * sol.phi)) for p, w in weights.items()}
        auto = None
        if acc is not None:
            auto = sol.phi
        return r, vals, auto, sol.report.iterations

    indices = range(first_replica, first_replica + n_replicas)
    values = {p: [] for p in pairs}
    iters = []

    def consume(result):
        r, vals, phi, it = result
        for p in pairs:
            values[p].append(vals[p])
        iters.append(it)
        if acc is not None:
            acc.add(phi)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            # map yields in submission order, so merges are deterministic
            for res in pool.map(one, indices):
                consume(res)
    else:
        for r in indices:
            consume(one(r))
    idx = np.array(list(indices))
    samples = {
        p: SampleSet(np.array(values[p]), p[0], p[1], f.describe(p[1]), idx, master_seed) for p in pairs
    }
    return Campaign(shape, law, xi, f, master_seed, samples, acc.table() if acc is not None else None, iters)


def campaign_rows(campaign: Campaign, lam=1.0, n_boot=1000, seed=0):
    return [r.csv_row() for r in campaign.reports(lam, n_boot, seed)]


def cauchy_check(reports, widen: float = 1.0) -> dict:
    """Successive variance differences along a decreasing eps grid.

    The sequence passes when every difference is no larger than the previous
    one plus the combined half-width of the confidence intervals involved
    (half-widths multiplied by ``widen``).
    """
    reports = sorted(reports, key=lambda r: -r.eps)
    var = np.array([r.var_eps for r in reports])
    half = np.array([0.5 * (r.var_eps_ci[1] - r.var_eps_ci[0]) for r in reports])
    diffs = np.abs(np.diff(var))
    diff_half = widen * (half[:-1] + half[1:])
    ok = [bool(diffs[i + 1] <= diffs[i] + diff_half[i + 1]) for i in range(len(diffs) - 1)]
    return {
        "eps": [r.eps for r in reports],
        "var": var.tolist(),
        "differences": diffs.tolist(),
        "difference_halfwidth": diff_half.tolist(),
        "steps_ok": ok,
        "passed": all(ok),
    }


# ----------------------------------------------------------------------------
# Moment scan


@dataclass
class MomentRow:
    eps: float
    lam: float
    p: int
    moment: float
    normalized: float
    ci: tuple
    odd: bool = False

    def csv_row(self):
        return [self.eps, self.lam, self.p, self.moment, self.normalized, *self.ci, int(self.odd)]


MOMENT_CSV_HEADER = ["eps", "lambda", "p", "moment", "normalized", "normalized_lo", "normalized_hi", "odd_p"]


def moment_scan(campaign: Campaign, p_list=(2, 4), lam_list=None, eps_list=None, n_boot=1000, seed=0) -> list:
    """<|Phi_eps(f_lam)|^p>^(1/p) / lam^(1 - d/2) over the (eps, lam, p) grid."""
    for p in p_list:
        if int(p) != p or not 1 <= p <= 8:
            raise PreconditionError("moment orders must be integers in 1..8")
    d = campaign.shape.d
    lam_list = campaign.lam_list if lam_list is None else lam_list
    eps_list = campaign.eps_list if eps_list is None else eps_list
    rows = []
    for e in eps_list:
        for l in lam_list:
            s = campaign.samples[(float(e), float(l))]
            norm = l ** (1 - d / 2)
            for p in p_list:
                stat = lambda x, p=p: np.mean(np.abs(x) ** p, axis=1) ** (1.0 / p)
                m, ci = bootstrap(s.values, stat, n_boot, seed)
                rows.append(MomentRow(float(e), float(l), int(p), m, m / norm, (ci[0] / norm, ci[1] / norm), p % 2 == 1))
    return rows
