import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from corrlab.corrector import (
    basis_correctors,
    corrector_rhs,
    effective_matrix,
    ensemble_effective_matrix,
    solve_corrector,
)
from corrlab.environment import ConductanceLaw, SeedSpec, constant_environment, sample_environment
from corrlab.errors import ConvergenceError, PreconditionError
from corrlab.lattice import LatticeShape
from corrlab.solver import SolverConfig, dense_oracle_solve

LAW = ConductanceLaw(1.0, 4.0)


def env_at(seed, L=3):
    return sample_environment(LatticeShape(3, L), LAW, SeedSpec(seed, 0))


def test_constant_law_has_zero_corrector():
    env = constant_environment(LatticeShape(3, 6), 2.0)
    for xi in ([1, 0, 0], [0.3, -0.5, 2.0]):
        sol = solve_corrector(env, xi)
        assert np.abs(sol.phi).max() <= 1e-9 and sol.residual == 0.0
    A = effective_matrix(env, basis_correctors(env))
    np.testing.assert_array_equal(A, 2.0 * np.eye(3))


def test_linearity_in_xi():
    env = env_at(2, 6)
    cfg = SolverConfig(rel_tol=1e-12)
    one = solve_corrector(env, [1, 0.5, 0], cfg=cfg).phi
    two = solve_corrector(env, [2, 1.0, 0], cfg=cfg).phi
    np.testing.assert_allclose(two, 2 * one, atol=1e-8)


@settings(max_examples=10)
@given(st.integers(0, 10**6), st.sampled_from([0.0, 0.5]))
def test_matches_dense_oracle(seed, mu):
    env = env_at(seed)
    xi = np.array([1.0, -0.4, 0.2])
    sol = solve_corrector(env, xi, mu, SolverConfig(rel_tol=1e-12))
    ref = dense_oracle_solve(env, mu, corrector_rhs(env, xi))
    np.testing.assert_allclose(sol.phi, ref, atol=1e-9)
    assert sol.residual < 1e-10
    if mu == 0:
        assert abs(sol.phi.mean()) < 1e-12


def brute_effective_matrix(env):
    """Quadratic form from dense-oracle correctors, summed edge by edge."""
    shape = env.shape
    d, L = shape.d, shape.L
    phis = [dense_oracle_solve(env, 0.0, corrector_rhs(env, np.eye(d)[j])) for j in range(d)]
    A = np.zeros((d, d))
    for x in np.ndindex(shape.vertex_shape):
        for i in range(d):
            y = list(x)
            y[i] = (y[i] + 1) % L
            a = env.a[(i,) + x]
            psi = [(1.0 if i == j else 0.0) + phis[j][tuple(y)] - phis[j][x] for j in range(d)]
            for j in range(d):
                for k in range(d):
                    A[j, k] += a * psi[j] * psi[k]
    return A / shape.n_vertices


def test_effective_matrix_matches_brute_force():
    env = env_at(7)
    A = effective_matrix(env, basis_correctors(env, SolverConfig(rel_tol=1e-13)))
    np.testing.assert_allclose(A, brute_effective_matrix(env), atol=1e-9)


@settings(max_examples=10)
@given(st.integers(0, 10**6))
def test_effective_matrix_ellipticity(seed):
    env = env_at(seed, 4)
    A = effective_matrix(env, basis_correctors(env))
    r = np.random.default_rng(seed)
    for xi in list(np.eye(3)) + list(r.standard_normal((10, 3))):
        q = xi @ A @ xi
        n2 = xi @ xi
        assert 1.0 * n2 - 1e-10 <= q <= 4.0 * n2 + 1e-10
    assert np.allclose(A, A.T)


def test_ensemble_identical_seeds_and_constant_law():
    shape = LatticeShape(3, 4)
    em = ensemble_effective_matrix(shape, LAW, [SeedSpec(3, 1)] * 4)
    assert not np.any(em.stderr)
    const = ensemble_effective_matrix(shape, ConductanceLaw(3.0, 3.0), [SeedSpec(0, r) for r in range(3)])
    np.testing.assert_array_equal(const.A_h, 3.0 * np.eye(3))
    assert not np.any(const.stderr)


def test_ensemble_is_isotropic_small():
    shape = LatticeShape(3, 8)
    em = ensemble_effective_matrix(shape, LAW, [SeedSpec(0, r) for r in range(16)])
    off = em.A_h[~np.eye(3, dtype=bool)]
    se = em.stderr[~np.eye(3, dtype=bool)]
    assert np.all(np.abs(off) <= 3 * se + 1e-12)
    ev = np.linalg.eigvalsh(em.A_h)
    assert 1.0 <= ev.min() and ev.max() <= 4.0


def test_ensemble_independent_of_threads():
    shape = LatticeShape(3, 6)
    seeds = [SeedSpec(5, r) for r in range(4)]
    a = ensemble_effective_matrix(shape, LAW, seeds, threads=1)
    b = ensemble_effective_matrix(shape, LAW, seeds, threads=3)
    assert a.A_h.tobytes() == b.A_h.tobytes()


def test_guards():
    env = env_at(1, 6)
    with pytest.raises(ConvergenceError):
        solve_corrector(env, [1, 0, 0], cfg=SolverConfig(rel_tol=1e-14, max_iter=1, preconditioner="none"))
    with pytest.raises(PreconditionError):
        effective_matrix(env, basis_correctors(env)[:2])
    with pytest.raises(PreconditionError):
        ensemble_effective_matrix(env.shape, LAW, [SeedSpec(0, 0)])
