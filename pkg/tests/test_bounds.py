import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from corrlab.bounds import (
    constant_scan,
    eepsum_check,
    eepsum_rhs,
    lattice_points_along,
    refine,
    refinement_drift,
    xesum_check,
)
from corrlab.errors import PreconditionError, SizeGuardError


def brute_xesum(d, e, eps):
    R = int(1 / eps)
    ax = np.arange(-R, R + 1)
    pts = np.stack(np.meshgrid(*([ax] * d), indexing="ij"), -1).reshape(-1, d)
    pts = pts[np.linalg.norm(pts, axis=1) <= 1 / eps + 1e-9]
    return float(np.sum((1 + np.linalg.norm(pts - np.asarray(e), axis=1)) ** (1 - d)))


def test_eps_one_is_hand_countable():
    c = xesum_check(3, None, 1.0)
    assert c.n_terms == 7
    assert c.lhs == 1 + 6 * 2.0**-2 == 2.5
    assert c.rhs == 1.0


def test_xesum_regression_value():
    c = xesum_check(3, None, 1 / 16)
    # frozen from the first direct summation
    assert c.lhs == pytest.approx(141.84298742947286, rel=1e-12)
    assert c.lhs * (1 / 16) == pytest.approx(8.865186714342054, rel=1e-12)
    assert c.ratio == pytest.approx(8.865186714342054, rel=1e-12)


@settings(max_examples=20)
@given(st.sampled_from([1 / 2, 1 / 3, 1 / 4, 1 / 6]), st.lists(st.integers(-10, 10), min_size=3, max_size=3))
def test_xesum_matches_brute_force(eps, e):
    assert xesum_check(3, e, eps).lhs == pytest.approx(brute_xesum(3, e, eps), rel=1e-12)


def test_xesum_d4():
    assert xesum_check(4, None, 1 / 4).lhs == pytest.approx(brute_xesum(4, [0, 0, 0, 0], 1 / 4), rel=1e-12)


def test_far_regime_below_near_maximum():
    scan = constant_scan("xesum", 3, [1 / 8, 1 / 16], [0, 1, 2, 4])
    rm = scan.regime_max()
    assert rm["far"] <= rm["near"]
    assert np.all(scan.ratios > 0)


def test_eepsum_regression_and_constancy():
    ratios = [eepsum_check(3, 4, None, e).ratio for e in (1 / 8, 1 / 16, 1 / 32)]
    np.testing.assert_allclose(ratios, [0.9843364172530256, 1.273046661370524, 1.6331413336646459], rtol=1e-10)
    # bounded: the ratio approaches the constant 4 pi / 2 of the logarithmic growth from below
    assert max(ratios) < 2 * math.pi


def test_eepsum_rhs_merges_equal_powers():
    eps = 1 / 8
    e = np.array([3.0, 4.0, 0.0])
    assert eepsum_rhs(3, 3, e, eps) == pytest.approx(2 * abs(math.log(eps)) * (1 + eps * 5) ** -3, rel=1e-15)


def test_eepsum_rotation_invariance():
    a = eepsum_check(3, 4, (5, 0, 0), 1 / 8).lhs
    b = eepsum_check(3, 4, (0, 0, 5), 1 / 8).lhs
    c = eepsum_check(3, 4, (0, -5, 0), 1 / 8).lhs
    assert abs(a - b) < 0.01 * a and abs(a - c) < 0.01 * a


def test_eepsum_tail_is_conservative():
    # a larger summation radius moves mass from the (upper-bounding) tail into the exact sum
    small = eepsum_check(3, 4, None, 1 / 4)
    big = eepsum_check(3, 4, None, 1 / 4, radius=40)
    assert big.lhs <= small.lhs
    assert big.lhs == pytest.approx(small.lhs, rel=0.05)


def test_guards():
    with pytest.raises(PreconditionError):
        xesum_check(2, None, 0.5)
    with pytest.raises(SizeGuardError):
        xesum_check(3, None, 1 / 256)
    with pytest.raises(SizeGuardError):
        xesum_check(6, None, 0.5)
    with pytest.raises(PreconditionError):
        eepsum_check(3, 4, None, 1 / 8, radius=10)
    with pytest.raises(PreconditionError):
        eepsum_check(3, -1, None, 1 / 8)
    with pytest.raises(PreconditionError):
        constant_scan("triangle")


def test_singleton_scan_is_single_check():
    scan = constant_scan("xesum", 3, [1 / 8], [0])
    assert len(scan.rows) == 1
    assert scan.max_ratio == xesum_check(3, None, 1 / 8).ratio
    scan2 = constant_scan("eepsum", 3, [1 / 8], [0], p=4)
    assert scan2.max_ratio == eepsum_check(3, 4, None, 1 / 8).ratio


def test_scan_points_and_refinement():
    pts = lattice_points_along(3, [0, 1], 1 / 8)
    assert [list(p) for p in pts] == [[0, 0, 0], [8, 0, 0], [5, 5, 5]]
    g = refine([1 / 8, 1 / 32])
    assert g[1] == pytest.approx(1 / 16)
    coarse, fine, drift = refinement_drift("xesum", 3, [1 / 8, 1 / 16, 1 / 32], [0, 1, 2])
    assert len(fine.rows) > len(coarse.rows)
    assert drift < 0.2


def test_scan_csv_and_summary():
    scan = constant_scan("xesum", 3, [1 / 4, 1 / 8], [0, 1])
    lines = scan.csv_text().splitlines()
    assert lines[0] == "eps,e_1,e_2,e_3,regime,lhs,rhs,ratio,tail"
    assert len(lines) == 1 + len(scan.rows)
    s = scan.summary()
    assert s["max_ratio"] == scan.max_ratio and s["n_points"] == len(scan.rows)
