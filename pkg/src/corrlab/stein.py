"""Derivatives of the corrector and of Phi_eps with respect to the Gaussian drivers.

All first derivatives of Phi come from one auxiliary solve (the adjoint field
u with div A grad u = w, w the projected field weights):

    d_e Phi = -a'(zeta_e) psi(e) grad u(e),          psi = xi + grad phi.

A full row of second derivatives at an anchor edge e' costs one dipole solve
D = G(., head e') - G(., base e'):

    d_e' d_e Phi = a'(e) a'(e') grad D(e) [psi(e') grad u(e) + psi(e) grad u(e')]
                   - [e == e'] a''(e) psi(e) grad u(e).

The same identities with w replaced by a Green column give the derivatives of
phi(x) itself.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .corrector import CorrectorSolution, solve_corrector
from .environment import ConductanceLaw, SeedSpec, perturb_direction, perturb_edge, sample_environment
from .errors import ConvergenceError, PreconditionError
from .field import TestFunction, check_admissible, field_weights
from .lattice import EdgeId, LatticeShape, divergence, edge_indicator, edge_midpoints, gradient
from .solver import SolverConfig, dipole_solve, green_column, solve

STEIN_CONSTANT = math.sqrt(5.0 / math.pi)


@dataclass
class DerivativeField:
    order: int
    values: np.ndarray  # edge field
    anchor: EdgeId | None = None

    def __post_init__(self):
        if self.order not in (1, 2):
            raise PreconditionError("derivative order must be 1 or 2")
        if self.order == 2 and self.anchor is None:
            raise PreconditionError("a second-derivative row needs its anchor edge")

    def at(self, e: EdgeId, shape: LatticeShape) -> float:
        return float(self.values[e.index(shape)])


def _checked(result, what):
    u, report = result
    if not report.converged:
        raise ConvergenceError(f"{what} failed ({report.status})", report)
    return u


def adjoint_field(env, f: TestFunction, lam: float, eps: float, cfg: SolverConfig | None = None) -> np.ndarray:
    """u with div A grad u = w - mean(w), w the weights of Phi_eps(f_lam)."""
    w = field_weights(env.shape, f, lam, eps)
    return adjoint_from_weights(env, w, cfg)


def adjoint_from_weights(env, w, cfg: SolverConfig | None = None) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    return _checked(solve(env, 0.0, w - w.mean(), cfg), "adjoint solve")


def first_derivatives_all_edges(env, corrector: CorrectorSolution, u: np.ndarray) -> DerivativeField:
    if corrector.env_ref != env.seed or corrector.phi.shape != env.shape.vertex_shape or u.shape != env.shape.vertex_shape:
        raise PreconditionError("corrector and adjoint field must live on this environment")
    psi = corrector.corrected_gradient()
    return DerivativeField(1, -env.derivative(1) * psi * gradient(u))


def _second_row(a1, a2, psi, grad_u, grad_D, e_prime: EdgeId, shape):
    idx = e_prime.index(shape)
    row = a1 * a1[idx] * grad_D * (psi[idx] * grad_u + psi * grad_u[idx])
    row[idx] -= a2[idx] * psi[idx] * grad_u[idx]
    return row


def dipole_gradient(env, e_prime: EdgeId, cfg: SolverConfig | None = None) -> np.ndarray:
    """e -> grad_e of x -> G(x, head e') - G(x, base e')."""
    return gradient(_checked(dipole_solve(env, e_prime, 0.0, cfg), "dipole solve"))


def second_derivative_row(
    env, corrector: CorrectorSolution, u: np.ndarray, e_prime: EdgeId, cfg: SolverConfig | None = None, grad_D=None
) -> DerivativeField:
    """d_e' d_e Phi for every edge e (pass ``grad_D`` to reuse a dipole solve)."""
    if grad_D is None:
        grad_D = dipole_gradient(env, e_prime, cfg)
    psi = corrector.corrected_gradient()
    row = _second_row(env.derivative(1), env.derivative(2), psi, gradient(u), grad_D, e_prime, env.shape)
    return DerivativeField(2, row, e_prime)


def phi_derivative_at(env, corrector, x, cfg: SolverConfig | None = None):
    """(grad G_x, first-derivative field e -> d_e phi(x)); G_x the Green column at x."""
    G = _checked(green_column(env, x, cfg), "Green column")
    grad_G = gradient(G)
    psi = corrector.corrected_gradient()
    return grad_G, DerivativeField(1, -env.derivative(1) * psi * grad_G)


# ----------------------------------------------------------------------------
# Independent re-solve route (used as an oracle)


def derivative_field_pde(env, corrector, e: EdgeId, cfg: SolverConfig | None = None) -> np.ndarray:
    """d_e phi by solving div A grad v = -div(a'(e) 1_e psi)."""
    psi = corrector.corrected_gradient()
    src = env.derivative(1) * edge_indicator(env.shape, e) * psi
    return _checked(solve(env, 0.0, -divergence(src), cfg), "derivative solve")


def second_derivative_field_pde(env, corrector, e: EdgeId, e_prime: EdgeId, cfg: SolverConfig | None = None) -> np.ndarray:
    """d_e' d_e phi from the twice-differentiated corrector equation."""
    shape = env.shape
    a1 = env.derivative(1)
    v_e = derivative_field_pde(env, corrector, e, cfg)
    v_ep = derivative_field_pde(env, corrector, e_prime, cfg)
    src = a1 * edge_indicator(shape, e_prime) * gradient(v_e) + a1 * edge_indicator(shape, e) * gradient(v_ep)
    if e.index(shape) == e_prime.index(shape):
        src = src + env.derivative(2) * edge_indicator(shape, e) * corrector.corrected_gradient()
    return _checked(solve(env, 0.0, -divergence(src), cfg), "second derivative solve")


def phi_functional(env, xi, w, cfg: SolverConfig | None = None, x0=None):
    sol = solve_corrector(env, xi, 0.0, cfg, x0)
    return float(np.sum(w * sol.phi)), sol


def fd_first(env, base: CorrectorSolution, w, e: EdgeId, h: float = 1e-4, cfg: SolverConfig | None = None) -> float:
    """Central difference of Phi in zeta_e, warm-started from the base corrector."""
    vals = []
    for s in (1.0, -1.0):
        v, _ = phi_functional(perturb_edge(env, e, s * h), base.xi, w, cfg, base.phi)
        vals.append(v)
    return (vals[0] - vals[1]) / (2 * h)


def fd_directional(env, base, w, direction, h: float = 1e-4, cfg: SolverConfig | None = None) -> float:
    vals = []
    for s in (1.0, -1.0):
        v, _ = phi_functional(perturb_direction(env, direction, s * h), base.xi, w, cfg, base.phi)
        vals.append(v)
    return (vals[0] - vals[1]) / (2 * h)


def fd_second(env, base, w, e: EdgeId, e_prime: EdgeId, h: float = 1e-3, cfg: SolverConfig | None = None) -> float:
    """Second-order central difference in (zeta_e, zeta_e')."""
    if e.index(env.shape) == e_prime.index(env.shape):
        vals = {}
        for s in (1, 0, -1):
            v, _ = phi_functional(perturb_edge(env, e, s * h), base.xi, w, cfg, base.phi)
            vals[s] = v
        return (vals[1] - 2 * vals[0] + vals[-1]) / (h * h)
    total = 0.0
    for s1 in (1, -1):
        for s2 in (1, -1):
            pert = perturb_edge(perturb_edge(env, e, s1 * h), e_prime, s2 * h)
            v, _ = phi_functional(pert, base.xi, w, cfg, base.phi)
            total += s1 * s2 * v
    return total / (4 * h * h)


# ----------------------------------------------------------------------------
# Stein bound


@dataclass
class SteinBoundReport:
    eps: float
    bound: float
    bound_truncated: float
    tail_estimate: float
    truncation_radius: int
    sampled_anchors: int
    mc_replicas: int
    sigma_eps: float
    sampling_stderr: float = 0.0
    mc_stderr: float = 0.0
    radius_profile: list = field(default_factory=list)
    degenerate: bool = False

    @property
    def stderr(self) -> float:
        return math.hypot(self.sampling_stderr, self.mc_stderr)

    def to_dict(self) -> dict:
        return {
            "eps": self.eps,
            "bound": self.bound,
            "bound_truncated": self.bound_truncated,
            "tail_estimate": self.tail_estimate,
            "truncation_radius": self.truncation_radius,
            "sampled_anchors": self.sampled_anchors,
            "mc_replicas": self.mc_replicas,
            "sigma_eps": self.sigma_eps,
            "sampling_stderr": self.sampling_stderr,
            "mc_stderr": self.mc_stderr,
            "stderr": self.stderr,
            "radius_profile": [list(r) for r in self.radius_profile],
            "degenerate": self.degenerate,
        }


def _torus_offsets(mids, point, L):
    diff = mids - point
    return diff - L * np.round(diff / L)


def choose_anchors(shape: LatticeShape, m: int, seed: int = 0, n_shells: int = 4):
    """Stratified anchor sample: shells of |e'| (midpoint, centered), proportional allocation.

    Returns (anchors, shell_of_anchor, shell_sizes).
    """
    mids = edge_midpoints(shape)
    radius = np.linalg.norm(mids, axis=-1).reshape(-1)  # row-major over (dir, x...)
    n_edges = radius.size
    if m >= n_edges:
        picks = np.arange(n_edges)
        return [_edge_from_array_index(k, shape) for k in picks], np.zeros(n_edges, int), np.array([n_edges])
    n_shells = max(1, min(n_shells, m // 2))
    bounds = np.linspace(0.0, radius.max() + 1e-9, n_shells + 1)
    shell = np.clip(np.searchsorted(bounds, radius, side="right") - 1, 0, n_shells - 1)
    sizes = np.bincount(shell, minlength=n_shells)
    alloc = np.maximum(2, np.floor(m * sizes / n_edges).astype(int))
    alloc = np.minimum(alloc, sizes)
    while alloc.sum() < m and np.any(alloc < sizes):
        j = int(np.argmax((sizes - alloc) / np.maximum(alloc, 1)))
        alloc[j] += 1
    rng = np.random.Generator(np.random.Philox(key=np.array([seed, 2**62 + 7], dtype=np.uint64)))
    picks, tags = [], []
    for h in range(n_shells):
        members = np.flatnonzero(shell == h)
        chosen = np.sort(rng.choice(members, size=int(alloc[h]), replace=False))
        picks.extend(chosen.tolist())
        tags.extend([h] * len(chosen))
    return [_edge_from_array_index(k, shape) for k in picks], np.array(tags), sizes


def _edge_from_array_index(k, shape):
    idx = np.unravel_index(int(k), shape.edge_shape)
    return EdgeId(tuple(int(v) for v in idx[1:]), int(idx[0]))


@dataclass
class _AnchorGeometry:
    edge: EdgeId
    ball: np.ndarray  # flat array indices of edges with |e - e'| <= R
    dist: np.ndarray  # their midpoint distances
    outside_weight: np.ndarray  # r^-d on edges outside the ball (flat, zero inside)


def _anchor_geometry(shape, anchor: EdgeId, R: float):
    mids = edge_midpoints(shape)
    dist = np.linalg.norm(_torus_offsets(mids, anchor.midpoint(shape), shape.L), axis=-1).reshape(-1)
    inside = dist <= R
    outside = np.where(inside, 0.0, np.maximum(dist, 1.0) ** (-shape.d))
    return _AnchorGeometry(anchor, np.flatnonzero(inside), dist[inside], outside)


@dataclass
class SteinCampaign:
    shape: LatticeShape
    eps_list: list
    lam: float
    values: dict  # eps -> Phi samples (replica order)
    reports: dict  # eps -> SteinBoundReport
    replica_indices: np.ndarray


def _bound_from_sums(d1_sum, d2_sum, n, sigma, geoms, tags, sizes, R, d, radii):
    """Bound, truncated bound, sampling stderr and radius profile from fourth-power sums."""
    M1 = (d1_sum / n) ** 0.25
    S_trunc, S_full = [], []
    prof = {r: [] for r in radii}
    for k, g in enumerate(geoms):
        M2 = (d2_sum[k] / n) ** 0.25
        m1 = M1[g.ball]
        S_trunc.append(float(np.sum(m1 * M2)))
        for r in radii:
            sel = g.dist <= r
            prof[r].append(float(np.sum(m1[sel] * M2[sel])))
        shell = (g.dist > 0.5 * R) & (M2 > 0)
        if np.any(shell):
            c = math.exp(float(np.mean(np.log(M2[shell]) + d * np.log(g.dist[shell]))))
            tail = c * float(np.sum(M1 * g.outside_weight))
        else:
            tail = 0.0
        S_full.append(S_trunc[-1] + tail)
    S_trunc, S_full = np.array(S_trunc), np.array(S_full)

    def total(S):
        est, var = 0.0, 0.0
        for h, Nh in enumerate(sizes):
            sel = tags == h
            if not np.any(sel):
                continue
            vals = S[sel] ** 2
            est += Nh * vals.mean()
            if sel.sum() > 1 and sel.sum() < Nh:
                var += Nh**2 * vals.var(ddof=1) / sel.sum() * (1 - sel.sum() / Nh)
        return est, var

    scale = STEIN_CONSTANT / sigma**2
    full, var_full = total(S_full)
    trunc, _ = total(S_trunc)
    bound = scale * math.sqrt(full)
    # delta method: sd(sqrt(T)) = sd(T) / (2 sqrt(T))
    samp = scale * math.sqrt(var_full) / (2 * math.sqrt(full)) if full > 0 else 0.0
    profile = [(r, scale * math.sqrt(total(np.array(prof[r]))[0])) for r in radii]
    return bound, scale * math.sqrt(trunc), samp, profile


def stein_campaign(
    shape: LatticeShape,
    law: ConductanceLaw,
    xi,
    f: TestFunction,
    eps_list,
    n_replicas: int,
    R: int,
    m: int,
    lam: float = 1.0,
    master_seed: int = 0,
    cfg: SolverConfig | None = None,
    threads: int = 1,
    anchor_seed: int = 0,
    n_groups: int = 8,
) -> SteinCampaign:
    """Joint campaign: samples of Phi_eps(f_lam) and the Stein bound at every eps."""
    if n_replicas < 16:
        raise PreconditionError("fourth moments need at least 16 replicas")
    if not 1 <= R <= shape.L / 2:
        raise PreconditionError(f"truncation radius must lie in [1, L/2], got {R}")
    xi = np.asarray(xi, dtype=float)
    eps_list = [float(e) for e in eps_list]
    for e in eps_list:
        check_admissible(shape, lam, e)
    weights = {e: field_weights(shape, f, lam, e) for e in eps_list}
    anchors, tags, sizes = choose_anchors(shape, m, anchor_seed)
    geoms = [_anchor_geometry(shape, a, R) for a in anchors]
    n_groups = min(n_groups, n_replicas)
    n_e = len(eps_list)
    d1_sum = np.zeros((n_groups, n_e, shape.n_edges))
    d2_sum = [np.zeros((n_groups, n_e, len(g.ball))) for g in geoms]
    values = {e: [] for e in eps_list}

    def one(r):
        env = sample_environment(shape, law, SeedSpec(master_seed, r))
        try:
            sol = solve_corrector(env, xi, 0.0, cfg)
        except ConvergenceError as err:
            raise ConvergenceError(f"replica {r}: {err}", err.report) from err
        a1, a2 = env.derivative(1), env.derivative(2)
        psi = sol.corrected_gradient()
        if not np.any(a1) and not np.any(a2):
            zeros = np.zeros(shape.n_edges)
            return r, [0.0] * n_e, [zeros] * n_e, [[np.zeros(len(g.ball)) for g in geoms] for _ in eps_list]
        grad_D = [dipole_gradient(env, g.edge, cfg) for g in geoms]
        vals, d1s, d2s = [], [], []
        for e in eps_list:
            w = weights[e]
            vals.append(float(np.sum(w * sol.phi)))
            grad_u = gradient(adjoint_from_weights(env, w, cfg))
            d1s.append((-a1 * psi * grad_u).reshape(-1) ** 4)
            rows = []
            for g, gD in zip(geoms, grad_D):
                row = _second_row(a1, a2, psi, grad_u, gD, g.edge, shape).reshape(-1)
                rows.append(row[g.ball] ** 4)
            d2s.append(rows)
        return r, vals, d1s, d2s

    indices = list(range(n_replicas))
    group_of = np.array(indices) * n_groups // n_replicas

    def consume(res):
        r, vals, d1s, d2s = res
        gi = group_of[r]
        for j, e in enumerate(eps_list):
            values[e].append(vals[j])
            d1_sum[gi, j] += d1s[j]
            for k in range(len(geoms)):
                d2_sum[k][gi, j] += d2s[j][k]

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            for res in pool.map(one, indices):
                consume(res)
    else:
        for r in indices:
            consume(one(r))

    radii = sorted({max(1, R // 4), max(1, R // 2), max(1, 3 * R // 4), R})
    reports = {}
    for j, e in enumerate(eps_list):
        x = np.array(values[e])
        sigma = float(x.std(ddof=1))
        tot1 = d1_sum[:, j].sum(axis=0)
        if sigma == 0.0 or not np.any(tot1):
            reports[e] = SteinBoundReport(e, 0.0, 0.0, 0.0, R, len(geoms), n_replicas, sigma, 0.0, 0.0,
                                          [(r, 0.0) for r in radii], True)
            continue
        tot2 = [s[:, j].sum(axis=0) for s in d2_sum]
        bound, trunc, samp, profile = _bound_from_sums(
            tot1, tot2, n_replicas, sigma, geoms, tags, sizes, R, shape.d, radii
        )
        # grouped jackknife over replica blocks
        jack = []
        for gi in range(n_groups):
            keep = group_of != gi
            n_keep = int(keep.sum())
            sd = float(x[keep].std(ddof=1))
            b, *_ = _bound_from_sums(
                tot1 - d1_sum[gi, j], [t - s[gi, j] for t, s in zip(tot2, d2_sum)], n_keep, sd,
                geoms, tags, sizes, R, shape.d, [R],
            )
            jack.append(b)
        jack = np.array(jack)
        mc = math.sqrt((n_groups - 1) / n_groups * float(np.sum((jack - jack.mean()) ** 2)))
        reports[e] = SteinBoundReport(e, bound, trunc, bound - trunc, R, len(geoms), n_replicas, sigma, samp, mc, profile)
    return SteinCampaign(shape, eps_list, lam, {e: np.array(v) for e, v in values.items()}, reports, np.array(indices))


def stein_bound(campaign: SteinCampaign, eps: float) -> SteinBoundReport:
    return campaign.reports[float(eps)]


# ----------------------------------------------------------------------------
# Decay of derivative moments


@dataclass
class DecayTable:
    kind: str  # "first" or "second"
    separation: np.ndarray
    moment: np.ndarray  # root mean square over replicas, averaged in the bin
    stderr: np.ndarray
    n_replicas: int

    def rows(self):
        return [[float(a), float(b), float(c)] for a, b, c in zip(self.separation, self.moment, self.stderr)]


@dataclass
class DecayFit:
    kind: str
    exponent: float
    intercept: float
    r2: float
    r_min: float
    r_max: float
    n_bins: int
    status: str = "ok"

    def to_dict(self) -> dict:
        return self.__dict__.copy()


def _bin_rms(dist, sq_by_replica, L, n_bins=12):
    """Average mean-square over log-spaced distance bins; returns centers, rms, stderr."""
    r_lo, r_hi = 1.0, L / 2
    edges = np.geomspace(r_lo, r_hi, n_bins + 1)
    which = np.searchsorted(edges, dist, side="right") - 1
    centers, rms, se = [], [], []
    for b in range(n_bins):
        sel = which == b
        if not np.any(sel):
            continue
        per_rep = sq_by_replica[:, sel].mean(axis=1)  # bin-average mean-square per replica
        ms = per_rep.mean()
        if ms <= 0:
            continue
        centers.append(float(np.exp(np.mean(np.log(dist[sel])))))
        rms.append(math.sqrt(ms))
        se.append(0.5 * per_rep.std(ddof=1) / math.sqrt(len(per_rep)) / math.sqrt(ms))
    return np.array(centers), np.array(rms), np.array(se)


def decay_campaign(
    shape: LatticeShape,
    law: ConductanceLaw,
    xi,
    n_replicas: int,
    master_seed: int = 0,
    cfg: SolverConfig | None = None,
    threads: int = 1,
    anchor_offset=(0, 0, 0),
):
    """Tables of <|d_e phi(0)|^2>^(1/2) vs |e| and <|d_e' d_e phi(0)|^2>^(1/2) vs |e - e'|.

    The anchor e' sits at a fixed offset from the observation point 0.
    """
    if n_replicas < 16:
        raise PreconditionError("decay statistics need at least 16 replicas")
    xi = np.asarray(xi, dtype=float)
    d = shape.d
    x0 = (0,) * d
    off = tuple(anchor_offset)[:d] + (0,) * max(0, d - len(anchor_offset))
    e_prime = EdgeId(shape.wrap(off), 0)
    mids = edge_midpoints(shape)
    dist1 = np.linalg.norm(_torus_offsets(mids, np.zeros(d), shape.L), axis=-1).reshape(-1)
    dist2 = np.linalg.norm(_torus_offsets(mids, e_prime.midpoint(shape), shape.L), axis=-1).reshape(-1)

    def one(r):
        env = sample_environment(shape, law, SeedSpec(master_seed, r))
        sol = solve_corrector(env, xi, 0.0, cfg)
        grad_G, first = phi_derivative_at(env, sol, x0, cfg)
        grad_D = dipole_gradient(env, e_prime, cfg)
        psi = sol.corrected_gradient()
        # G_0 plays the role of the adjoint field for the functional phi(0)
        second = _second_row(env.derivative(1), env.derivative(2), psi, grad_G, grad_D, e_prime, shape)
        return first.values.reshape(-1) ** 2, second.reshape(-1) ** 2

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            res = list(pool.map(one, range(n_replicas)))
    else:
        res = [one(r) for r in range(n_replicas)]
    sq1 = np.stack([a for a, _ in res])
    sq2 = np.stack([b for _, b in res])
    c1, m1, s1 = _bin_rms(dist1, sq1, shape.L)
    c2, m2, s2 = _bin_rms(dist2, sq2, shape.L)
    return DecayTable("first", c1, m1, s1, n_replicas), DecayTable("second", c2, m2, s2, n_replicas)


def decay_fit(table: DecayTable, r_min: float = 2.0, r_max: float | None = None, L: int | None = None) -> DecayFit:
    """Log-log OLS exponent of the moment against the separation over [r_min, r_max]."""
    if r_max is None:
        if L is None:
            raise PreconditionError("give r_max or the lattice side L")
        r_max = L / 4
    sel = (table.separation >= r_min) & (table.separation <= r_max) & (table.moment > 0)
    if sel.sum() < 3 or r_max < 2 * r_min:
        return DecayFit(table.kind, math.nan, math.nan, math.nan, r_min, r_max, int(sel.sum()), "inconclusive")
    x = np.log(table.separation[sel])
    y = np.log(table.moment[sel])
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    r2 = 1 - float(np.sum(resid**2)) / float(np.sum((y - y.mean()) ** 2)) if np.ptp(y) > 0 else 1.0
    return DecayFit(table.kind, float(slope), float(intercept), r2, r_min, r_max, int(sel.sum()))
