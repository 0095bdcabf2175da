"""Exact lattice sums for the two convolution estimates and scans of their constants.

    xesum:  sum_{|x| <= 1/eps} (1 + |x - e|)^(1-d)      vs  eps^-1 / (1 + |eps e|)^(d-1)
    eepsum: sum_e (1 + |e - e'|)^(-d) (1 + |eps e|)^(-p) vs  |log eps| [(1 + |eps e'|)^(-d) + (1 + |eps e'|)^(-p)]

|.| is the Euclidean norm; lattice balls are enumerated point by point.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate

from .errors import PreconditionError, SizeGuardError

# smallest eps for exact enumeration of the ball of radius 1/eps, per dimension
MIN_EPS = {3: 1 / 128, 4: 1 / 32, 5: 1 / 16}


def _check_d(d):
    if d < 3:
        raise PreconditionError("the lemma sums need d >= 3")
    if d not in MIN_EPS:
        raise SizeGuardError(f"exact enumeration supported for d in {sorted(MIN_EPS)}, got {d}")


def _ball_slabs(d: int, radius: float):
    """Yield the lattice points of {|x| <= radius} slab by slab (fixed order)."""
    R = int(math.floor(radius + 1e-12))
    r2 = radius * radius + 1e-9
    axis = np.arange(-R, R + 1)
    rest = np.stack(np.meshgrid(*([axis] * (d - 1)), indexing="ij"), axis=-1).reshape(-1, d - 1)
    rest_sq = np.sum(rest * rest, axis=1)
    for x1 in axis:
        keep = rest_sq + x1 * x1 <= r2
        if np.any(keep):
            pts = np.empty((int(keep.sum()), d))
            pts[:, 0] = x1
            pts[:, 1:] = rest[keep]
            yield pts


def _as_point(e, d):
    e = np.zeros(d) if e is None else np.asarray(e, dtype=float)
    if e.shape != (d,):
        raise PreconditionError(f"lattice point must have length {d}")
    return e


@dataclass
class Check:
    lhs: float
    rhs: float
    ratio: float
    tail: float = 0.0
    n_terms: int = 0


def xesum_check(d: int, e, eps: float) -> Check:
    _check_d(d)
    if not 0 < eps <= 1:
        raise PreconditionError("eps must lie in (0, 1]")
    if eps < MIN_EPS[d] - 1e-15:
        raise SizeGuardError(f"eps = {eps:g} below the exact-summation guard {MIN_EPS[d]:g} for d = {d}")
    e = _as_point(e, d)
    lhs, count = 0.0, 0
    for pts in _ball_slabs(d, 1.0 / eps):
        r = np.linalg.norm(pts - e, axis=1)
        lhs += float(np.sum((1.0 + r) ** (1 - d)))
        count += len(pts)
    rhs = (1.0 / eps) / (1.0 + eps * float(np.linalg.norm(e))) ** (d - 1)
    return Check(lhs, rhs, lhs / rhs, 0.0, count)


def eepsum_rhs(d: int, p: float, e_prime, eps: float) -> float:
    s = 1.0 + eps * float(np.linalg.norm(e_prime))
    return abs(math.log(eps)) * (s ** (-d) + s ** (-p))


def _eepsum_tail(d, p, eps, radius, e_norm):
    """Integral bound for the summands with |e| > radius.

    For |e| = s > |e'| the summand is at most h(s) = (1 + s - |e'|)^-d (1 + eps s)^-p,
    decreasing in s; the unit cube around e lies in {|x| > radius - sqrt(d)/2} and
    every x in it has |e| >= |x| - sqrt(d)/2.
    """
    c = math.sqrt(d) / 2
    start = radius - c
    if start - c <= e_norm:
        raise PreconditionError("radius too small for the tail comparison")
    area = 2 * math.pi ** (d / 2) / math.gamma(d / 2)

    def integrand(r):
        s = r - c
        return area * r ** (d - 1) * (1 + s - e_norm) ** (-d) * (1 + eps * s) ** (-p)

    val, err = integrate.quad(integrand, start, np.inf, epsabs=0.0, epsrel=1e-10, limit=400)
    return val + err


def eepsum_check(d: int, p: float, e_prime, eps: float, radius: float | None = None) -> Check:
    """Exact sum inside ``radius`` plus a rigorous integral tail (so the ratio is conservative)."""
    _check_d(d)
    if not p > 0:
        raise PreconditionError("p must be positive")
    if not 0 < eps <= 0.5:
        raise PreconditionError("eps must lie in (0, 1/2]")
    e_prime = _as_point(e_prime, d)
    e_norm = float(np.linalg.norm(e_prime))
    need = max(4.0 / eps, 2.0 * e_norm + math.sqrt(d) + 1)
    if radius is None:
        radius = need
    if radius < need - 1e-9:
        raise PreconditionError(f"radius {radius:g} below the guard max(4/eps, 2|e'| + sqrt(d) + 1) = {need:g}")
    if eps < MIN_EPS[d] / 2 - 1e-15:
        raise SizeGuardError(f"eps = {eps:g} too small for exact summation in d = {d}")
    inner, count = 0.0, 0
    for pts in _ball_slabs(d, radius):
        r = np.linalg.norm(pts - e_prime, axis=1)
        inner += float(np.sum((1.0 + r) ** (-d) * (1.0 + eps * np.linalg.norm(pts, axis=1)) ** (-p)))
        count += len(pts)
    tail = _eepsum_tail(d, p, eps, radius, e_norm)
    lhs = inner + tail
    rhs = eepsum_rhs(d, p, e_prime, eps)
    return Check(lhs, rhs, lhs / rhs, tail, count)


@dataclass
class BoundScan:
    lemma: str
    d: int
    p: float | None
    rows: list = field(default_factory=list)  # dicts: eps, e (list), regime, lhs, rhs, ratio, tail

    @property
    def ratios(self) -> np.ndarray:
        return np.array([r["ratio"] for r in self.rows])

    @property
    def max_ratio(self) -> float:
        return float(self.ratios.max())

    @property
    def argmax(self) -> dict:
        return self.rows[int(np.argmax(self.ratios))]

    def regime_max(self) -> dict:
        out = {}
        for r in self.rows:
            out[r["regime"]] = max(out.get(r["regime"], 0.0), r["ratio"])
        return out

    def max_at_boundary(self) -> bool:
        """True when the maximizing eps is an end point of the scanned eps range."""
        eps = sorted({r["eps"] for r in self.rows})
        return len(eps) > 2 and self.argmax["eps"] in (eps[0], eps[-1])

    def per_eps_max(self) -> list:
        eps = sorted({r["eps"] for r in self.rows}, reverse=True)
        return [(e, max(r["ratio"] for r in self.rows if r["eps"] == e)) for e in eps]

    def header(self) -> list:
        return ["eps"] + [f"e_{i + 1}" for i in range(self.d)] + ["regime", "lhs", "rhs", "ratio", "tail"]

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header())
        for r in self.rows:
            w.writerow([repr(r["eps"])] + [int(v) for v in r["e"]] + [r["regime"]] + [repr(r[k]) for k in ("lhs", "rhs", "ratio", "tail")])
        return buf.getvalue()

    def summary(self) -> dict:
        arg = self.argmax
        return {
            "lemma": self.lemma,
            "d": self.d,
            "p": self.p,
            "n_points": len(self.rows),
            "max_ratio": self.max_ratio,
            "argmax": {"eps": arg["eps"], "e": list(arg["e"]), "regime": arg["regime"]},
            "max_at_eps_boundary": self.max_at_boundary(),
            "regime_max": self.regime_max(),
            "per_eps_max": self.per_eps_max(),
            "min_ratio": float(self.ratios.min()),
        }

    def summary_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True) + "\n"


def lattice_points_along(d: int, multiples, eps: float, directions=("axis", "diagonal")):
    """Lattice points at distance ~ m / eps along the first axis and the main diagonal."""
    pts = []
    for m in multiples:
        for kind in directions:
            if kind == "axis":
                v = np.zeros(d, dtype=int)
                v[0] = int(round(m / eps))
            else:
                v = np.full(d, int(round(m / eps / math.sqrt(d))), dtype=int)
            if not any(np.array_equal(v, q) for q in pts):
                pts.append(v)
    return pts


def constant_scan(lemma: str, d: int = 3, eps_grid=(1 / 8, 1 / 16, 1 / 32, 1 / 64), multiples=(0, 1, 2, 4, 8), p=None) -> BoundScan:
    """Ratios lhs/rhs over an (eps, point) grid; points at |e| ~ multiple / eps."""
    if lemma not in ("xesum", "eepsum"):
        raise PreconditionError(f"unknown lemma {lemma!r}")
    if lemma == "eepsum" and p is None:
        p = 2 * (d - 1)
    scan = BoundScan(lemma, d, p if lemma == "eepsum" else None)
    for eps in eps_grid:
        for e in lattice_points_along(d, multiples, eps):
            norm = float(np.linalg.norm(e))
            if lemma == "xesum":
                chk = xesum_check(d, e, eps)
                regime = "far" if norm > 2 / eps else "near"
            else:
                chk = eepsum_check(d, p, e, eps)
                regime = "far" if norm > 2 / eps else "near"
            scan.rows.append(
                {"eps": float(eps), "e": [int(v) for v in e], "regime": regime, "lhs": chk.lhs, "rhs": chk.rhs, "ratio": chk.ratio, "tail": chk.tail}
            )
    return scan


def refine(grid):
    """Nested refinement of a geometric grid: insert geometric midpoints."""
    g = sorted(grid, reverse=True)
    out = []
    for a, b in zip(g[:-1], g[1:]):
        out += [a, math.sqrt(a * b)]
    return out + [g[-1]]


def refine_multiples(multiples):
    m = sorted(multiples)
    out = []
    for a, b in zip(m[:-1], m[1:]):
        out += [a, 0.5 * (a + b)]
    return out + [m[-1]]


def refinement_drift(lemma: str, d: int = 3, eps_grid=(1 / 8, 1 / 16, 1 / 32, 1 / 64), multiples=(0, 1, 2, 4, 8), p=None):
    """Relative change of the max ratio when both grids are refined over the same range."""
    coarse = constant_scan(lemma, d, eps_grid, multiples, p)
    fine = constant_scan(lemma, d, refine(eps_grid), refine_multiples(multiples), p)
    drift = abs(fine.max_ratio - coarse.max_ratio) / coarse.max_ratio
    return coarse, fine, drift
