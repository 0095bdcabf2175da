import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from corrlab.errors import PreconditionError
from corrlab.lattice import (
    EdgeId,
    LatticeShape,
    apply_operator,
    delta,
    divergence,
    edge_inner,
    edge_from_flat_layout,
    edge_to_flat_layout,
    gradient,
    lift_vector,
    read_field,
    vertex_inner,
    write_field,
)
from corrlab.solver import dense_matrix


def loop_gradient(f):
    d, L = f.ndim, f.shape[0]
    out = np.zeros((d,) + f.shape)
    for x in np.ndindex(f.shape):
        for i in range(d):
            y = list(x)
            y[i] = (y[i] + 1) % L
            out[(i,) + x] = f[tuple(y)] - f[x]
    return out


def test_gradient_of_constant_is_zero():
    assert not np.any(gradient(np.full((4, 4, 4), 2.5)))


def test_gradient_of_delta():
    g = gradient(delta(LatticeShape(3, 4), (0, 0, 0)))
    assert g[0, 0, 0, 0] == -1.0
    assert g[0, 3, 0, 0] == 1.0
    # the 3 outgoing and 3 incoming edges of 0 carry the only nonzeros
    assert np.count_nonzero(g) == 6


def test_gradient_matches_loop(rng):
    f = rng.standard_normal((3, 3, 3))
    np.testing.assert_array_equal(gradient(f), loop_gradient(f))


def test_divergence_of_constant_is_zero():
    assert np.allclose(divergence(np.full((3, 4, 4, 4), 1.7)), 0.0, atol=1e-15)


def test_laplacian_of_delta():
    lap = divergence(gradient(delta(LatticeShape(3, 4), (0, 0, 0))))
    assert lap[0, 0, 0] == 6.0
    for i in range(3):
        for s in (1, 3):
            y = [0, 0, 0]
            y[i] = s
            assert lap[tuple(y)] == -1.0
    assert np.count_nonzero(lap) == 7


@given(st.integers(0, 2**32 - 1), st.sampled_from([(3, 3), (3, 4), (4, 3), (2, 5)]))
def test_adjointness(seed, dl):
    d, L = dl
    r = np.random.default_rng(seed)
    F = r.standard_normal((d,) + (L,) * d)
    g = r.standard_normal((L,) * d)
    lhs, rhs = vertex_inner(divergence(F), g), edge_inner(F, gradient(g))
    assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs))


@given(st.integers(0, 2**32 - 1))
def test_operator_symmetric_and_positive(seed):
    r = np.random.default_rng(seed)
    shape = LatticeShape(3, 3)
    a = r.uniform(1, 4, shape.edge_shape)
    u, v = r.standard_normal((2, 3, 3, 3))
    uAv = vertex_inner(u, apply_operator(a, 1.0, v))
    vAu = vertex_inner(v, apply_operator(a, 1.0, u))
    assert abs(uAv - vAu) <= 1e-12 * max(1.0, abs(uAv))
    assert vertex_inner(u, apply_operator(a, 1.0, u)) >= vertex_inner(u, u)


def test_operator_unit_conductance_is_laplacian():
    shape = LatticeShape(3, 4)
    u = delta(shape, (0, 0, 0))
    np.testing.assert_array_equal(apply_operator(np.ones(shape.edge_shape), 0.0, u), divergence(gradient(u)))


def test_operator_matches_dense(rng):
    shape = LatticeShape(3, 3)
    a = rng.uniform(1, 4, shape.edge_shape)
    u = rng.standard_normal(shape.vertex_shape)
    M = dense_matrix(a, 0.5)
    np.testing.assert_allclose(apply_operator(a, 0.5, u).reshape(-1), M @ u.reshape(-1), rtol=1e-12, atol=1e-12)


def test_lift_vector():
    shape = LatticeShape(3, 4)
    assert not np.any(lift_vector([0, 0, 0], shape))
    F = lift_vector([1, 0, 0], shape)
    assert np.all(F[0] == 1) and not np.any(F[1:])
    assert np.allclose(divergence(lift_vector([0.3, -1.2, 2.0], shape)), 0.0, atol=1e-14)


def test_edge_flat_index_direction_fastest():
    shape = LatticeShape(3, 4)
    F = np.zeros(shape.edge_shape)
    e = EdgeId((1, 2, 3), 2)
    F[e.index(shape)] = 1.0
    flat = edge_to_flat_layout(F)
    assert flat[e.flat(shape)] == 1.0
    assert e.flat(shape) == ((1 * 4 + 2) * 4 + 3) * 3 + 2
    assert EdgeId.from_flat(e.flat(shape), shape) == e
    np.testing.assert_array_equal(edge_from_flat_layout(flat, shape), F)


def test_field_roundtrip(tmp_path, rng):
    v = rng.standard_normal((4, 4, 4))
    E = rng.standard_normal((3, 4, 4, 4))
    write_field(tmp_path / "v.bin", v, "vertex")
    write_field(tmp_path / "e.bin", E, "edge")
    v2, shape, kind = read_field(tmp_path / "v.bin")
    assert kind == "vertex" and shape == LatticeShape(3, 4)
    np.testing.assert_array_equal(v, v2)
    E2, _, kind = read_field(tmp_path / "e.bin")
    assert kind == "edge"
    np.testing.assert_array_equal(E, E2)


def test_shape_guards():
    with pytest.raises(PreconditionError):
        LatticeShape(3, 1)
    with pytest.raises(PreconditionError):
        write_field("/tmp/never.bin", np.zeros(3), "face")


def test_torus_distance():
    shape = LatticeShape(3, 8)
    assert shape.torus_distance((0, 0, 0), (7, 0, 0)) == 1.0
    assert shape.torus_distance((1, 1, 1), (1, 1, 1)) == 0.0
