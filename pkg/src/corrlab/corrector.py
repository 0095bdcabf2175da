"""Periodic correctors and the effective conductivity matrix."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .environment import ConductanceLaw, SeedSpec, sample_environment
from .errors import ConvergenceError, PreconditionError
from .lattice import LatticeShape, apply_operator, divergence, gradient, lift_vector
from .solver import SolveReport, SolverConfig, solve


@dataclass
class CorrectorSolution:
    xi: np.ndarray
    mu: float
    phi: np.ndarray
    residual: float
    env_ref: SeedSpec
    report: SolveReport | None = None

    def corrected_gradient(self) -> np.ndarray:
        """Edge field xi + grad(phi)."""
        shape = LatticeShape(self.phi.ndim, self.phi.shape[0])
        return lift_vector(self.xi, shape) + gradient(self.phi)

    def manifest(self) -> dict:
        return {
            "xi": [float(v) for v in self.xi],
            "mu": self.mu,
            "residual": self.residual,
            "seed": {"master_seed": self.env_ref.master_seed, "replica_index": self.env_ref.replica_index},
            "solve": self.report.to_dict() if self.report else None,
        }


def corrector_rhs(env, xi) -> np.ndarray:
    return -divergence(env.a * lift_vector(xi, env.shape))


def corrector_residual(env, xi, mu, phi) -> float:
    flux = env.a * lift_vector(xi, env.shape)
    denom = np.linalg.norm(divergence(flux))
    if denom == 0.0:
        return 0.0
    res = apply_operator(env, mu, phi) + divergence(flux)
    return float(np.linalg.norm(res) / denom)


def solve_corrector(env, xi=None, mu: float = 0.0, cfg: SolverConfig | None = None, x0=None) -> CorrectorSolution:
    """Solve (mu + div A grad) phi = -div(A xi); mean-zero gauge when mu == 0.

    ``x0`` warm-starts the iteration (e.g. from the corrector of a nearby environment).
    """
    cfg = cfg or SolverConfig()
    shape = env.shape
    xi = np.zeros(shape.d) if xi is None else np.asarray(xi, dtype=float)
    if xi.shape == ():
        raise PreconditionError("xi must be a d-vector")
    if xi.shape == (shape.d,) and not np.any(xi):
        return CorrectorSolution(xi, mu, np.zeros(shape.vertex_shape), 0.0, env.seed, SolveReport(0, 0.0, True))
    phi, report = solve(env, mu, corrector_rhs(env, xi), cfg, x0)
    if not report.converged:
        raise ConvergenceError(
            f"corrector solve failed ({report.status}, rel residual {report.final_rel_residual:.2e})",
            report,
        )
    return CorrectorSolution(xi, mu, phi, corrector_residual(env, xi, mu, phi), env.seed, report)


def effective_matrix(env, correctors) -> np.ndarray:
    """Single-cell estimate of A_h from the d basis correctors."""
    d = env.shape.d
    if len(correctors) != d:
        raise PreconditionError(f"need {d} basis correctors, got {len(correctors)}")
    for j, c in enumerate(correctors):
        if c.env_ref != env.seed or c.phi.shape != env.shape.vertex_shape:
            raise PreconditionError("corrector does not belong to this environment")
        if not np.array_equal(c.xi, np.eye(d)[j]):
            raise PreconditionError(f"corrector {j} is not for the basis vector e_{j + 1}")
    psi = [c.corrected_gradient() for c in correctors]
    n = env.shape.n_vertices
    A = np.empty((d, d))
    for j in range(d):
        flux = env.a * psi[j]
        for k in range(j, d):
            A[j, k] = A[k, j] = float(np.sum(flux * psi[k])) / n
    return 0.5 * (A + A.T)


def basis_correctors(env, cfg: SolverConfig | None = None, mu: float = 0.0):
    return [solve_corrector(env, np.eye(env.shape.d)[j], mu, cfg) for j in range(env.shape.d)]


@dataclass
class EffectiveMatrix:
    A_h: np.ndarray
    stderr: np.ndarray
    n_replicas: int
    per_replica: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "A_h": self.A_h.tolist(),
            "stderr": self.stderr.tolist(),
            "n_replicas": self.n_replicas,
            "eigenvalues": np.linalg.eigvalsh(self.A_h).tolist(),
        }


def ensemble_effective_matrix(
    shape: LatticeShape,
    law: ConductanceLaw,
    seeds,
    cfg: SolverConfig | None = None,
    threads: int = 1,
) -> EffectiveMatrix:
    seeds = list(seeds)
    if len(seeds) < 2:
        raise PreconditionError("ensemble needs at least 2 replicas")

    def one(seed):
        env = sample_environment(shape, law, seed)
        return effective_matrix(env, basis_correctors(env, cfg))

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            mats = list(pool.map(one, seeds))
    else:
        mats = [one(s) for s in seeds]
    stack = np.stack(mats)
    mean = stack.mean(axis=0)
    stderr = stack.std(axis=0, ddof=1) / math.sqrt(len(mats))
    return EffectiveMatrix(mean, stderr, len(mats), mats)
