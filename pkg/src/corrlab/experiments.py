"""Desk-scale experiments shared by scripts/ and the acceptance tests.

Each function runs one campaign and returns a plain dict with the numbers and
the pass/fail decision, so results can be dumped as JSON unchanged.
"""
from __future__ import annotations

import math

import numpy as np

from .corrector import ensemble_effective_matrix
from .environment import ConductanceLaw, SeedSpec
from .field import TestFunction, fit_Q, sigma2
from .lattice import LatticeShape
from .stats import cauchy_check, mc_campaign, moment_scan, noise_floor, rate_fit, wasserstein1_to_gaussian
from .stein import stein_campaign

DEFAULT_LAW = ConductanceLaw(1.0, 4.0)
E1 = (1.0, 0.0, 0.0)


def variance_convergence(
    L: int = 128,
    eps_list=(1 / 4, 1 / 8, 1 / 16, 1 / 32),
    n_replicas: int = 200,
    n_A: int = 16,
    master_seed: int = 0,
    threads: int = 1,
    widen: float = 1.0,
    n_boot: int = 1000,
    window: int = 12,
    r_min: float = 4.0,
    r_max: float = 10.0,
    law: ConductanceLaw = DEFAULT_LAW,
    f: TestFunction | None = None,
) -> dict:
    """Var[Phi_eps(f)] along an eps grid, plus the fitted-Q prediction at the smallest eps.

    The prediction is the limit variance of the field periodized on a torus of
    side eps L, which is what a finite lattice can converge to.
    """
    shape = LatticeShape(3, L)
    f = f or TestFunction("mollifier_bump", 3)
    camp = mc_campaign(shape, law, E1, f, eps_list, n_replicas, (1.0,), master_seed, None, threads,
                       covariance_window=window)
    reps = camp.reports(1.0, n_boot, master_seed)
    cauchy = cauchy_check(reps, widen)
    em = ensemble_effective_matrix(shape, law, [SeedSpec(master_seed, r) for r in range(n_A)], None, threads)
    fit = fit_Q(camp.covariance, em.A_h, r_min, r_max, True)
    smallest = min(reps, key=lambda r: r.eps)
    pred = sigma2(fit.model, f, 1.0, torus_side=smallest.eps * L)
    lo, hi = smallest.var_eps_ci
    mid = smallest.var_eps
    lo_w, hi_w = mid - widen * (mid - lo), mid + widen * (hi - mid)
    in_ci = bool(lo_w <= pred.value <= hi_w)
    return {
        "L": L,
        "n_replicas": n_replicas,
        "widen": widen,
        "eps": [r.eps for r in reps],
        "var": [r.var_eps for r in reps],
        "var_ci": [list(r.var_eps_ci) for r in reps],
        "dK": [r.dK for r in reps],
        "noise_floor": [r.noise_floor for r in reps],
        "cauchy": cauchy,
        "A_h": em.A_h.tolist(),
        "fit": fit.to_dict(),
        "prediction": pred.value,
        "prediction_continuum": sigma2(fit.model, f, 1.0).value,
        "prediction_torus_side": smallest.eps * L,
        "smallest_eps_ci": [lo_w, hi_w],
        "prediction_in_ci": in_ci,
        "passed": bool(cauchy["passed"] and in_ci),
        "reports": [r.to_dict() for r in reps],
    }


def gaussianity_rate(result: dict, d: int = 3) -> dict:
    """Rate fit of dK against eps^(d/2)|log eps| on a variance-convergence result."""
    eps = [e for e in result["eps"] if e < 1]
    idx = [result["eps"].index(e) for e in eps]
    fit = rate_fit(eps, [result["dK"][i] for i in idx], d, [result["noise_floor"][i] for i in idx])
    out = fit.to_dict()
    out["noise_floor"] = [result["noise_floor"][i] for i in idx]
    out["slope_ok"] = bool(fit.status == "ok" and abs(fit.slope - 1.0) <= 0.3)
    return out


def stein_dominance(
    L: int = 32,
    eps_list=(1 / 2, 1 / 4, 1 / 8),
    n_replicas: int = 32,
    R: int = 8,
    m: int = 24,
    master_seed: int = 0,
    threads: int = 1,
    law: ConductanceLaw = DEFAULT_LAW,
) -> dict:
    """Empirical dK against the Stein bound on one joint campaign.

    dK is estimated from n samples, so the estimate carries its own sampling
    error, bounded by the null noise floor; by the triangle inequality the
    check is dK_hat <= bound + 2 stderr(bound) + floor(n).
    """
    shape = LatticeShape(3, L)
    f = TestFunction("mollifier_bump", 3)
    camp = stein_campaign(shape, law, E1, f, eps_list, n_replicas, R, m, 1.0, master_seed, None, threads)
    floor = noise_floor(n_replicas)
    rows = []
    for e in camp.eps_list:
        rep = camp.reports[e]
        dK = wasserstein1_to_gaussian(camp.values[e])
        allowance = rep.bound + 2 * rep.stderr + floor
        rows.append({
            "eps": e,
            "dK": dK,
            "bound": rep.bound,
            "bound_stderr": rep.stderr,
            "noise_floor": floor,
            "allowance": allowance,
            "passed": bool(dK <= allowance),
            "report": rep.to_dict(),
        })
    return {"L": L, "n_replicas": n_replicas, "R": R, "m": m, "rows": rows, "passed": all(r["passed"] for r in rows)}


def moment_flatness(
    L: int = 32,
    eps: float = 1 / 8,
    lam_list=(1.0, 1 / 2, 1 / 4),
    p_list=(2, 4),
    n_replicas: int = 64,
    master_seed: int = 0,
    threads: int = 1,
    n_boot: int = 500,
    law: ConductanceLaw = DEFAULT_LAW,
) -> dict:
    """Normalized moments lam^(d/2-1) <|Phi_eps(f_lam)|^p>^(1/p) across lam at fixed eps."""
    shape = LatticeShape(3, L)
    f = TestFunction("mollifier_bump", 3)
    camp = mc_campaign(shape, law, E1, f, [eps], n_replicas, lam_list, master_seed, None, threads)
    rows = moment_scan(camp, p_list, n_boot=n_boot, seed=master_seed)
    spread = {}
    for p in p_list:
        vals = [r.normalized for r in rows if r.p == p]
        spread[p] = max(vals) / min(vals)
    return {
        "eps": eps,
        "lam": list(lam_list),
        "rows": [r.__dict__ for r in rows],
        "spread": spread,
        "passed": all(math.isfinite(s) and s <= 2.0 for s in spread.values()),
    }
