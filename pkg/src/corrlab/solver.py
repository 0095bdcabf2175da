"""Matrix-free solves of (mu + div A grad) u = g on the torus.

Conjugate gradients with the constant-coefficient operator as a spectral
preconditioner.  For ``mu == 0`` the kernel (constants) is removed by projecting
the right-hand side and every iterate onto mean-zero fields.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import scipy.fft as sfft

from .errors import ConfigError, PreconditionError, SizeGuardError
from .lattice import EdgeId, LatticeShape, apply_operator, delta

PRECONDITIONERS = ("none", "jacobi", "constant_coefficient_spectral")
DENSE_LIMIT = 4096


@dataclass(frozen=True)
class SolverConfig:
    rel_tol: float = 1e-10
    max_iter: int = 2000
    preconditioner: str = "constant_coefficient_spectral"

    def __post_init__(self):
        if not self.rel_tol > 0:
            raise ConfigError("rel_tol must be positive")
        if self.max_iter < 1:
            raise ConfigError("max_iter must be >= 1")
        if self.preconditioner not in PRECONDITIONERS:
            raise ConfigError(f"unknown preconditioner {self.preconditioner!r}")


@dataclass
class SolveReport:
    iterations: int
    final_rel_residual: float
    converged: bool
    status: str = "converged"

    def to_dict(self) -> dict:
        return asdict(self)


def laplacian_symbol(shape: LatticeShape) -> np.ndarray:
    """Eigenvalues of grad* grad on the torus, laid out for ``rfftn``."""
    k_full = 4.0 * np.sin(np.pi * np.arange(shape.L) / shape.L) ** 2
    k_half = k_full[: shape.L // 2 + 1]
    out = np.zeros((shape.L,) * (shape.d - 1) + (shape.L // 2 + 1,))
    for i in range(shape.d):
        ks = k_half if i == shape.d - 1 else k_full
        view = [1] * shape.d
        view[i] = ks.size
        out = out + ks.reshape(view)
    return out


def spectral_solve(shape: LatticeShape, mu: float, abar: float, g: np.ndarray) -> np.ndarray:
    """Exact inverse of ``mu + abar * grad* grad`` (pseudo-inverse when mu == 0)."""
    sym = mu + abar * laplacian_symbol(shape)
    gh = sfft.rfftn(g)
    zero = sym == 0.0
    sym = np.where(zero, 1.0, sym)
    gh = np.where(zero, 0.0, gh / sym)
    return sfft.irfftn(gh, s=g.shape)


def _make_preconditioner(env, mu, kind):
    shape = env.shape
    if kind == "none":
        return lambda r: r
    if kind == "jacobi":
        a = env.a
        diag = np.full(shape.vertex_shape, float(mu))
        for i in range(shape.d):
            diag += a[i] + np.roll(a[i], 1, axis=i)
        inv = 1.0 / diag
        return lambda r: inv * r
    abar = env.law.geometric_mean
    return lambda r: spectral_solve(shape, mu, abar, r)


def _norm(v):
    return math.sqrt(float(np.vdot(v, v)))


def solve(env, mu: float, g: np.ndarray, cfg: SolverConfig | None = None, x0=None):
    """Solve ``(mu + div A grad) u = g``; returns ``(u, SolveReport)``.

    For ``mu == 0`` the right-hand side must be mean-zero and the returned ``u``
    is mean-zero.  Non-convergence is reported, not raised.
    """
    cfg = cfg or SolverConfig()
    if mu < 0:
        raise PreconditionError("mu must be >= 0")
    g = np.asarray(g, dtype=float)
    gnorm = _norm(g)
    if gnorm == 0.0:
        return np.zeros_like(g), SolveReport(0, 0.0, True)
    if mu == 0:
        gmean = float(g.mean())
        if abs(gmean) > 1e-12 * gnorm:
            raise PreconditionError(
                f"incompatible right-hand side for mu=0: mean {gmean:.3e} vs norm {gnorm:.3e}"
            )
        g = g - gmean

    def project(v):
        if mu == 0:
            v -= v.mean()
        return v

    precond = _make_preconditioner(env, mu, cfg.preconditioner)
    tol = cfg.rel_tol * gnorm
    u = np.zeros_like(g) if x0 is None else project(np.array(x0, dtype=float))
    iterations = 0
    breakdown = False
    # restarts re-certify the recursive residual against the true one
    while True:
        r = project(g - apply_operator(env, mu, u))
        rnorm = _norm(r)
        if rnorm <= tol or iterations >= cfg.max_iter or breakdown:
            break
        z = project(precond(r))
        p = z.copy()
        rz = float(np.vdot(r, z))
        start = iterations
        while iterations < cfg.max_iter:
            Ap = apply_operator(env, mu, p)
            pAp = float(np.vdot(p, Ap))
            if pAp <= 0.0:
                breakdown = iterations == start
                break
            alpha = rz / pAp
            u += alpha * p
            r -= alpha * Ap
            iterations += 1
            if _norm(r) <= 0.5 * tol:
                break
            z = project(precond(r))
            rz_new = float(np.vdot(r, z))
            p *= rz_new / rz
            p += z
            rz = rz_new
        project(u)
    rel = rnorm / gnorm
    converged = rel <= cfg.rel_tol
    if converged:
        status = "converged"
    elif breakdown:
        status = "breakdown"
    else:
        status = "max_iter_exceeded"
    return u, SolveReport(iterations, rel, converged, status)


def dipole_rhs(shape: LatticeShape, e: EdgeId) -> np.ndarray:
    return delta(shape, e.head(shape)) - delta(shape, e.base)


def dipole_solve(env, e: EdgeId, mu: float = 0.0, cfg: SolverConfig | None = None):
    """x -> G(x, head) - G(x, base) for the operator mu + div A grad."""
    return solve(env, mu, dipole_rhs(env.shape, e), cfg)


def green_column(env, x, cfg: SolverConfig | None = None):
    """Mean-zero Green column G(., x) of div A grad (pseudo-inverse on the torus)."""
    shape = env.shape
    g = delta(shape, x) - 1.0 / shape.n_vertices
    return solve(env, 0.0, g, cfg)


def dense_matrix(env, mu: float) -> np.ndarray:
    """Assemble mu + div A grad edge by edge (independent of the stencil code)."""
    a = env.a if hasattr(env, "a") else np.asarray(env, dtype=float)
    shape = LatticeShape(a.shape[0], a.shape[1])
    n = shape.n_vertices
    if n > DENSE_LIMIT:
        raise SizeGuardError(f"dense oracle limited to {DENSE_LIMIT} vertices, got {n}")
    M = np.zeros((n, n))
    for idx in np.ndindex(shape.vertex_shape):
        x = int(np.ravel_multi_index(idx, shape.vertex_shape))
        for i in range(shape.d):
            y_idx = list(idx)
            y_idx[i] = (y_idx[i] + 1) % shape.L
            y = int(np.ravel_multi_index(y_idx, shape.vertex_shape))
            c = a[(i,) + idx]
            M[x, x] += c
            M[y, y] += c
            M[x, y] -= c
            M[y, x] -= c
    M[np.diag_indices(n)] += mu
    return M


def dense_oracle_solve(env, mu: float, g: np.ndarray) -> np.ndarray:
    shape = env.shape
    M = dense_matrix(env, mu)
    rhs = np.asarray(g, dtype=float).reshape(-1)
    n = rhs.size
    if mu == 0:
        # M + 11^T/n is invertible and its solution of the projected system is mean-zero
        rhs = rhs - rhs.mean()
        M = M + 1.0 / n
    return np.linalg.solve(M, rhs).reshape(shape.vertex_shape)
