import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from corrlab.environment import ConductanceLaw, SeedSpec, constant_environment, sample_environment
from corrlab.errors import PreconditionError, SizeGuardError
from corrlab.lattice import EdgeId, LatticeShape, apply_operator, delta
from corrlab.solver import (
    SolverConfig,
    dense_matrix,
    dense_oracle_solve,
    dipole_rhs,
    dipole_solve,
    green_column,
    solve,
)


def rand_env(seed, L=3):
    return sample_environment(LatticeShape(3, L), ConductanceLaw(1.0, 4.0), SeedSpec(seed, 0))


def test_constant_rhs_with_mass():
    env = rand_env(1, 4)
    u, rep = solve(env, 1.0, np.full(env.shape.vertex_shape, 0.7))
    assert rep.converged
    np.testing.assert_allclose(u, 0.7, rtol=1e-9)


def test_unit_conductance_delta_matches_pseudo_inverse():
    shape = LatticeShape(3, 4)
    env = constant_environment(shape, 1.0)
    g = delta(shape, (0, 0, 0)) - 1.0 / shape.n_vertices
    u, _ = solve(env, 0.0, g)
    M = dense_matrix(env, 0.0)
    ref = (np.linalg.pinv(M) @ g.reshape(-1)).reshape(shape.vertex_shape)
    np.testing.assert_allclose(u, ref, atol=1e-9)


def test_unit_conductance_spectral_kernel():
    # a = 1, mu = 0: the solution is the convolution with the Fourier torus Green kernel
    shape = LatticeShape(3, 6)
    env = constant_environment(shape, 1.0)
    rng = np.random.default_rng(0)
    g = rng.standard_normal(shape.vertex_shape)
    g -= g.mean()
    u, _ = solve(env, 0.0, g, SolverConfig(rel_tol=1e-13, preconditioner="jacobi"))
    k = 2 * np.pi * np.fft.fftfreq(6)
    K = np.meshgrid(k, k, k, indexing="ij")
    sym = sum(2 - 2 * np.cos(kk) for kk in K)
    sym[0, 0, 0] = np.inf
    ref = np.real(np.fft.ifftn(np.fft.fftn(g) / sym))
    np.testing.assert_allclose(u, ref, atol=1e-10)


@settings(max_examples=20)
@given(st.integers(0, 10**6), st.sampled_from([0.0, 0.5]), st.sampled_from(["none", "jacobi", "constant_coefficient_spectral"]))
def test_solver_matches_dense_oracle(seed, mu, pre):
    env = rand_env(seed)
    g = np.random.default_rng(seed).standard_normal(env.shape.vertex_shape)
    if mu == 0:
        g -= g.mean()
    u, rep = solve(env, mu, g, SolverConfig(rel_tol=1e-12, preconditioner=pre))
    ref = dense_oracle_solve(env, mu, g)
    assert rep.converged
    np.testing.assert_allclose(u, ref, atol=1e-9 * max(1.0, np.abs(ref).max()))
    np.testing.assert_allclose(apply_operator(env, mu, ref), g, atol=1e-10)


def test_dipole_antisymmetry_unit_conductance():
    shape = LatticeShape(3, 6)
    env = constant_environment(shape, 1.0)
    e = EdgeId((0, 0, 0), 0)
    D, _ = dipole_solve(env, e, 0.0, SolverConfig(rel_tol=1e-13))
    # the reflection x_1 -> 1 - x_1 swaps base and head
    refl = np.roll(D[::-1], 2, axis=0)
    np.testing.assert_allclose(refl, -D, atol=1e-9)


def test_dipole_is_solve_of_dipole_rhs():
    env = rand_env(3, 4)
    e = EdgeId((1, 2, 3), 2)
    D, _ = dipole_solve(env, e)
    u, _ = solve(env, 0.0, dipole_rhs(env.shape, e))
    np.testing.assert_array_equal(D, u)


def test_dipole_matches_dense_green_columns():
    env = rand_env(4)
    e = EdgeId((1, 0, 2), 1)
    D, _ = dipole_solve(env, e, 0.0, SolverConfig(rel_tol=1e-13))
    Gh, _ = green_column(env, e.head(env.shape), SolverConfig(rel_tol=1e-13))
    Gb, _ = green_column(env, e.base, SolverConfig(rel_tol=1e-13))
    np.testing.assert_allclose(D, Gh - Gb, atol=1e-9)
    n = env.shape.n_vertices
    ref = dense_oracle_solve(env, 0.0, delta(env.shape, e.head(env.shape)) - delta(env.shape, e.base))
    np.testing.assert_allclose(D, ref, atol=1e-9)


def test_solver_reports_nonconvergence():
    env = rand_env(5, 6)
    g = np.random.default_rng(1).standard_normal(env.shape.vertex_shape)
    g -= g.mean()
    _, rep = solve(env, 0.0, g, SolverConfig(rel_tol=1e-14, max_iter=2, preconditioner="none"))
    assert not rep.converged and rep.status == "max_iter_exceeded"


def test_solver_guards():
    env = rand_env(6)
    with pytest.raises(PreconditionError):
        solve(env, 0.0, np.ones(env.shape.vertex_shape))
    with pytest.raises(PreconditionError):
        solve(env, -1.0, np.zeros(env.shape.vertex_shape))
    with pytest.raises(SizeGuardError):
        dense_matrix(np.ones((3, 17, 17, 17)), 0.0)
