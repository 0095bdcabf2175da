import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from corrlab.environment import (
    ConductanceLaw,
    SeedSpec,
    constant_environment,
    edge_normals,
    law_eval,
    load_environment,
    perturb_edge,
    sample_environment,
    save_environment,
    translate,
)
from corrlab.errors import ConfigError
from corrlab.lattice import EdgeId, LatticeShape


def test_tanh_law_at_zero():
    law = ConductanceLaw(1.0, 4.0)
    assert law_eval(law, 0.0, 0) == 2.5
    assert law_eval(law, 0.0, 1) == 1.5


def test_second_derivative_sup_matches_calculus():
    law = ConductanceLaw(1.0, 4.0)
    z = np.linspace(-4, 4, 400001)
    grid_max = np.abs(law_eval(law, z, 2)).max()
    exact = 1.5 * 4 / (3 * math.sqrt(3))
    assert abs(grid_max - exact) < 1e-9
    assert law.sup_derivative(2) == pytest.approx(exact, rel=1e-12)


@pytest.mark.parametrize("kind", ["tanh", "affine-clamped-smooth"])
def test_law_derivatives_match_finite_differences(kind):
    law = ConductanceLaw(1.0, 4.0, kind)
    z = np.linspace(-3.7, 3.7, 41)
    h = 1e-5
    for order in (1, 2):
        fd = (law_eval(law, z + h, order - 1) - law_eval(law, z - h, order - 1)) / (2 * h)
        np.testing.assert_allclose(law_eval(law, z, order), fd, atol=1e-7)


@given(st.floats(-50, 50), st.sampled_from(["tanh", "affine-clamped-smooth"]))
def test_law_range(z, kind):
    a = law_eval(ConductanceLaw(1.0, 4.0, kind), z)
    assert 1.0 <= a <= 4.0


def test_sampling_is_deterministic():
    shape = LatticeShape(3, 6)
    law = ConductanceLaw()
    a = sample_environment(shape, law, SeedSpec(7, 3))
    b = sample_environment(shape, law, SeedSpec(7, 3))
    assert a.zeta.tobytes() == b.zeta.tobytes()
    c = sample_environment(shape, law, SeedSpec(7, 4))
    assert not np.array_equal(a.zeta, c.zeta)


def test_single_edge_regeneration():
    shape = LatticeShape(3, 5)
    env = sample_environment(shape, ConductanceLaw(), SeedSpec(11, 2))
    ks = [0, 1, 17, 200, shape.n_edges - 1]
    for k in ks:
        e = EdgeId.from_flat(k, shape)
        assert edge_normals(SeedSpec(11, 2), [k])[0] == env.zeta[e.index(shape)]


def test_driver_moments():
    env = sample_environment(LatticeShape(3, 32), ConductanceLaw(), SeedSpec(0, 0))
    z = env.zeta.reshape(-1)
    n = z.size
    assert abs(z.mean()) < 4 / math.sqrt(n)
    assert abs(z.var() - 1) < 4 * math.sqrt(2 / n)
    assert env.a.min() >= 1.0 and env.a.max() <= 4.0


def test_perturbation():
    shape = LatticeShape(3, 4)
    law = ConductanceLaw()
    env = sample_environment(shape, law, SeedSpec(1, 0))
    e = EdgeId((1, 2, 3), 1)
    same = perturb_edge(env, e, 0.0)
    assert np.array_equal(same.a, env.a)
    up = perturb_edge(env, e, 0.3)
    assert up.a[e.index(shape)] == law_eval(law, env.zeta[e.index(shape)] + 0.3)
    back = perturb_edge(up, e, -0.3)
    np.testing.assert_allclose(back.zeta, env.zeta, atol=1e-15)


def test_constant_environment_and_laws():
    env = constant_environment(LatticeShape(3, 4), 2.0)
    assert np.all(env.a == 2.0)
    assert not np.any(env.derivative(1)) and not np.any(env.derivative(2))
    with pytest.raises(ConfigError):
        ConductanceLaw(2.0, 1.0)
    with pytest.raises(ConfigError):
        ConductanceLaw(1.0, 2.0, "cubic")
    with pytest.raises(ConfigError):
        SeedSpec(-1, 0)


def test_save_load_and_translate(tmp_path):
    shape = LatticeShape(3, 4)
    env = sample_environment(shape, ConductanceLaw(), SeedSpec(3, 1))
    save_environment(env, tmp_path)
    back = load_environment(tmp_path)
    assert np.array_equal(back.zeta, env.zeta) and back.seed == env.seed
    moved = translate(env, (1, 0, 0))
    assert moved.a[0, 1, 0, 0] == env.a[0, 0, 0, 0]
