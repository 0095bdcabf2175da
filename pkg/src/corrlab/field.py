"""Rescaled corrector field, homogenized kernels and the limit variance.

Continuum conventions: ``f_hat(p) = int f(x) exp(-i p.x) dx`` and the kernel
``K(x) = (2 pi)^-d int exp(i p.x) (p.Qp) / (p.Ap)^2 dp``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import integrate
from scipy.interpolate import CubicSpline
from scipy.special import jv

from .errors import AdmissibilityError, PreconditionError, QuadratureError, SingularityError
from .environment import SeedSpec
from .lattice import LatticeShape, centered_coords

TEST_FUNCTION_KINDS = ("mollifier_bump", "product_bump")


def _bump(t):
    """exp(-1/(1-t^2)) on |t| < 1, zero elsewhere (t is a squared-radius-free argument)."""
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    inside = np.abs(t) < 1.0
    out[inside] = np.exp(-1.0 / (1.0 - t[inside] ** 2))
    return out


@lru_cache(maxsize=None)
def _gauss_legendre(n):
    return np.polynomial.legendre.leggauss(n)


def _gl_nodes(a, b, n):
    x, w = _gauss_legendre(n)
    return 0.5 * (b - a) * x + 0.5 * (b + a), 0.5 * (b - a) * w


@lru_cache(maxsize=None)
def _radial_grid(n=400):
    return _gl_nodes(0.0, 1.0, n)


@lru_cache(maxsize=None)
def _mollifier_mass(d: int) -> float:
    r, w = _radial_grid()
    sphere = 2.0 * math.pi ** (d / 2) / math.gamma(d / 2)
    return float(sphere * np.sum(w * _bump(r) * r ** (d - 1)))


@lru_cache(maxsize=None)
def _bump_mass_1d() -> float:
    t, w = _gl_nodes(-1.0, 1.0, 400)
    return float(np.sum(w * _bump(t)))


@dataclass(frozen=True)
class TestFunction:
    """Smooth unit-mass test function supported in the closed unit ball."""

    __test__ = False  # not a pytest class

    kind: str = "mollifier_bump"
    d: int = 3
    center: tuple = ()

    def __post_init__(self):
        if self.kind not in TEST_FUNCTION_KINDS:
            raise PreconditionError(f"unknown test function {self.kind!r}")
        if self.center and len(self.center) != self.d:
            raise PreconditionError("center must have length d")

    @property
    def support_radius(self) -> float:
        return 1.0

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.center:
            x = x - np.asarray(self.center, dtype=float)
        if self.kind == "mollifier_bump":
            r = np.sqrt(np.sum(x * x, axis=-1))
            return _bump(r) / _mollifier_mass(self.d)
        s = math.sqrt(self.d)
        vals = np.prod(_bump(s * x), axis=-1)
        return vals / (_bump_mass_1d() / s) ** self.d

    def scaled(self, x, lam: float) -> np.ndarray:
        """f_lam(x) = lam^-d f(x / lam)."""
        return lam ** (-self.d) * self(np.asarray(x, dtype=float) / lam)

    def fourier(self, p) -> np.ndarray:
        """f_hat at momenta ``p`` (array (..., d)); the phase of a center is dropped."""
        p = np.asarray(p, dtype=float)
        if self.kind == "mollifier_bump":
            return self.fourier_radial(np.sqrt(np.sum(p * p, axis=-1)))
        s = math.sqrt(self.d)
        return np.prod(_bump_fourier_1d(p / s), axis=-1) / (_bump_mass_1d()) ** self.d

    def fourier_radial(self, rho) -> np.ndarray:
        if self.kind != "mollifier_bump":
            raise PreconditionError("radial transform only defined for the mollifier bump")
        return _radial_fourier(np.asarray(rho, dtype=float), self.d) / _mollifier_mass(self.d)

    def describe(self, lam: float | None = None) -> dict:
        out = {"kind": self.kind, "d": self.d, "center": list(self.center) or [0.0] * self.d}
        if lam is not None:
            out["lambda"] = lam
        return out


def _radial_fourier(rho, d):
    """int_{R^d} bump(|x|) exp(-i p.x) dx for |p| = rho (unnormalized bump)."""
    r, w = _radial_grid()
    nu = d / 2 - 1
    flat = rho.reshape(-1)
    out = np.empty(flat.size)
    fr = w * _bump(r) * r ** (d - 1)
    for start in range(0, flat.size, 4096):
        chunk = flat[start : start + 4096]
        z = np.outer(chunk, r)
        with np.errstate(invalid="ignore", divide="ignore"):
            jt = jv(nu, z) / z**nu
        # J_nu(z) / z^nu -> 1 / (2^nu Gamma(nu+1)) as z -> 0
        small = z < 1e-8
        jt[small] = 1.0 / (2.0**nu * math.gamma(nu + 1.0))
        out[start : start + 4096] = (2.0 * math.pi) ** (d / 2) * (jt @ fr)
    return out.reshape(rho.shape)


def _bump_fourier_1d(k):
    t, w = _gl_nodes(-1.0, 1.0, 400)
    flat = np.asarray(k, dtype=float).reshape(-1)
    vals = np.cos(np.outer(flat, t)) @ (w * _bump(t))
    return vals.reshape(np.shape(k))


# ----------------------------------------------------------------------------
# Rescaled field


def check_admissible(shape: LatticeShape, lam: float, eps: float) -> None:
    if not (0 < eps and 0 < lam <= 1):
        raise PreconditionError(f"need eps > 0 and lambda in (0, 1], got eps={eps}, lambda={lam}")
    reach = lam / eps
    if not reach < shape.L / 2:
        min_L = int(math.floor(2 * reach)) + 1
        raise AdmissibilityError(
            f"support radius {reach:g} of f_lambda(eps x) does not fit in the torus of side "
            f"{shape.L}; need L >= {min_L}",
            min_L=min_L,
        )


def field_weights(shape: LatticeShape, f: TestFunction, lam: float, eps: float) -> np.ndarray:
    """Vertex weights w(x) = eps^(d/2+1) f_lam(eps x) on the centered domain."""
    check_admissible(shape, lam, eps)
    d = shape.d
    ratio = eps / lam
    x = centered_coords(shape).astype(float)
    pref = eps ** (d / 2 + 1) * lam ** (-d)
    return pref * f(x * ratio)


@dataclass
class FieldSample:
    value: float
    eps: float
    lam: float
    f_desc: dict
    seed: SeedSpec = field(default_factory=SeedSpec)


def phi_eps(phi, f: TestFunction, lam: float, eps: float) -> FieldSample:
    """Phi_eps(f_lam) = eps^(d/2+1) sum_x f_lam(eps x) phi(x)."""
    values = phi.phi if hasattr(phi, "phi") else np.asarray(phi, dtype=float)
    seed = getattr(phi, "env_ref", SeedSpec())
    shape = LatticeShape(values.ndim, values.shape[0])
    w = field_weights(shape, f, lam, eps)
    return FieldSample(float(np.sum(w * values)), eps, lam, f.describe(lam), seed)


# ----------------------------------------------------------------------------
# Homogenized kernels


@dataclass(frozen=True, eq=False)
class CovarianceModel:
    A_h: np.ndarray
    Q: np.ndarray

    def __post_init__(self):
        A = np.asarray(self.A_h, dtype=float)
        Q = np.asarray(self.Q, dtype=float)
        if A.shape != Q.shape or A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise PreconditionError("A_h and Q must be square matrices of equal size")
        if not (np.allclose(A, A.T) and np.allclose(Q, Q.T)):
            raise PreconditionError("A_h and Q must be symmetric")
        if np.linalg.eigvalsh(A).min() <= 0:
            raise PreconditionError("A_h must be positive definite")
        scale = max(1.0, float(np.abs(Q).max()))
        if np.linalg.eigvalsh(Q).min() < -1e-12 * scale:
            raise PreconditionError("Q must be positive semi-definite")
        object.__setattr__(self, "A_h", 0.5 * (A + A.T))
        object.__setattr__(self, "Q", 0.5 * (Q + Q.T))

    @property
    def d(self) -> int:
        return self.A_h.shape[0]

    def to_dict(self) -> dict:
        return {"A_h": self.A_h.tolist(), "Q": self.Q.tolist()}


def homogenized_green(A_h, x) -> np.ndarray:
    """Green function of -div(A_h grad) in R^d, d >= 3 (vectorized over x)."""
    A = np.asarray(A_h, dtype=float)
    d = A.shape[0]
    if d < 3:
        raise PreconditionError("homogenized Green function requires d >= 3")
    x = np.asarray(x, dtype=float)
    s = np.einsum("...i,ij,...j->...", x, np.linalg.inv(A), x)
    if np.any(s == 0):
        raise SingularityError("homogenized Green function is singular at x = 0")
    c = math.gamma(d / 2 - 1) / (4 * math.pi ** (d / 2) * math.sqrt(np.linalg.det(A)))
    return c * s ** ((2 - d) / 2)


# Proper-time form of the Fourier integral: with 1/q^2 = int_0^inf t exp(-t q) dt the
# p-integral of (p.Qp) exp(ip.x - t p.Ap) is Gaussian, giving
#   K(x) = int_0^inf t^2 h(t, x) d(log t),
#   t^2 h = C t^(-d/2) exp(-s/4t) [tr(QB) t/2 - v/4],  B = A^-1, s = x.Bx, v = xBQBx.
# Writing t = (s/4) e^w separates the x-dependence into powers of s, leaving two
# universal w-integrals.  Large t is the small-|p| region; the w-range is truncated
# there and the remainder added in closed form.
_W_LO, _W_HI = -6.0, 80.0


@lru_cache(maxsize=None)
def _proper_time_moments(d: int, rtol: float = 1e-12):
    out = []
    for power in (1.0 - d / 2, -d / 2):
        fn = lambda w, a=power: math.exp(a * w - math.exp(-w))
        val, err = integrate.quad(fn, _W_LO, _W_HI, epsabs=0.0, epsrel=rtol, limit=400)
        # for w > W_HI the factor exp(-e^-w) is 1 to double precision
        val += math.exp(power * _W_HI) / -power
        if err > 1e3 * rtol * abs(val):
            raise QuadratureError("proper-time integral did not converge", val, err)
        out.append(val)
    return tuple(out)


def kernel_K(model: CovarianceModel, x):
    """Covariance kernel K at one or several points ``x`` (shape (..., d))."""
    return kernel_values(model.A_h, model.Q, x)


def kernel_values(A, Q, x):
    """:func:`kernel_K` for an arbitrary symmetric (possibly indefinite) Q; linear in Q."""
    A = np.asarray(A, dtype=float)
    Q = np.asarray(Q, dtype=float)
    d = A.shape[0]
    if d < 3:
        raise PreconditionError("kernel K requires d >= 3")
    x = np.asarray(x, dtype=float)
    scalar = x.ndim == 1
    pts = x.reshape(-1, d)
    B = np.linalg.inv(A)
    s = np.einsum("ni,ij,nj->n", pts, B, pts)
    if np.any(s == 0):
        raise SingularityError("kernel K is singular at x = 0")
    Bx = pts @ B
    v = np.einsum("ni,ij,nj->n", Bx, Q, Bx)
    trQB = float(np.trace(Q @ B))
    m1, m2 = _proper_time_moments(d)
    C = (4.0 * math.pi) ** (-d / 2) / math.sqrt(np.linalg.det(A))
    out = C * (0.5 * trQB * (s / 4) ** (1 - d / 2) * m1 - 0.25 * v * (s / 4) ** (-d / 2) * m2)
    return float(out[0]) if scalar else out.reshape(x.shape[:-1])


# ----------------------------------------------------------------------------
# Limit variance


def _angular_sphere(A, Q, n_theta=48, n_phi=96):
    """int over S^2 of (w.Qw)/(w.Aw)^2 by Gauss-Legendre x trapezoid."""
    ct, wt = _gauss_legendre(n_theta)
    ph = 2 * np.pi * np.arange(n_phi) / n_phi
    st = np.sqrt(1 - ct**2)
    om = np.stack(
        [np.outer(st, np.cos(ph)), np.outer(st, np.sin(ph)), np.outer(ct, np.ones(n_phi))], axis=-1
    )
    num = np.einsum("...i,ij,...j->...", om, Q, om)
    den = np.einsum("...i,ij,...j->...", om, A, om)
    return float(np.sum(wt[:, None] * num / den**2) * 2 * np.pi / n_phi)


def angular_integral(A, Q) -> float:
    """int over S^(d-1) of (w.Qw)/(w.Aw)^2 for any d >= 3.

    Uses the Gaussian identity int_{R^d} g(p) e^{-|p|^2/2} dp =
    2^((d-4)/2) Gamma((d-2)/2) * int_S g for g homogeneous of degree -2, with
    the left side in proper-time form.
    """
    A = np.asarray(A, dtype=float)
    Q = np.asarray(Q, dtype=float)
    d = A.shape[0]
    alpha, V = np.linalg.eigh(A)
    qd = np.diag(V.T @ Q @ V)

    def integrand(t):
        m = t * alpha + 0.5
        return t * math.pi ** (d / 2) * np.prod(m) ** -0.5 * 0.5 * np.sum(qd / m)

    val, err = integrate.quad(integrand, 0.0, np.inf, epsabs=0.0, epsrel=1e-12, limit=400)
    radial = 2.0 ** ((d - 4) / 2) * math.gamma((d - 2) / 2)
    if err > 1e-8 * max(abs(val), 1e-300):
        raise QuadratureError("angular proper-time integral did not converge", val / radial, err / radial)
    return val / radial


_P_CUTOFF = {"mollifier_bump": 200.0, "product_bump": 300.0}


@lru_cache(maxsize=None)
def _radial_spline(d, rho_max):
    rho = np.linspace(0.0, rho_max, int(rho_max * 100) + 1)
    return CubicSpline(rho, _radial_fourier(rho, d) / _mollifier_mass(d))


@lru_cache(maxsize=None)
def _bump_spline(k_max):
    k = np.linspace(0.0, k_max, int(k_max * 100) + 1)
    return CubicSpline(k, _bump_fourier_1d(k) / _bump_mass_1d())


def _fhat_fast(f: TestFunction, p):
    """Spline-backed f_hat for bulk evaluation (torus sums, 3-D quadrature)."""
    p = np.asarray(p, dtype=float)
    cut = _P_CUTOFF[f.kind] * 1.05
    if f.kind == "mollifier_bump":
        rho = np.sqrt(np.sum(p * p, axis=-1))
        out = _radial_spline(f.d, cut)(np.minimum(rho, cut))
        return np.where(rho < cut, out, 0.0)
    s = math.sqrt(f.d)
    k = np.abs(p) / s
    vals = _bump_spline(cut)(np.minimum(k, cut))
    vals = np.where(k < cut, vals, 0.0)
    return np.prod(vals, axis=-1)


def _smooth_step(t):
    """C-infinity step: 0 for t <= 0, 1 for t >= 1."""
    t = np.clip(np.asarray(t, dtype=float), 0.0, 1.0)
    with np.errstate(divide="ignore", over="ignore"):
        a = np.where(t > 0, np.exp(-1.0 / np.where(t > 0, t, 1.0)), 0.0)
        b = np.where(t < 1, np.exp(-1.0 / np.where(t < 1, 1.0 - t, 1.0)), 0.0)
    return a / (a + b)


@dataclass
class Sigma2Result:
    value: float
    quad_err: float
    lam: float
    torus_side: float | None = None

    def to_row(self, eps=None) -> dict:
        return {"lambda": self.lam, "eps": eps, "sigma2": self.value, "quad_err": self.quad_err}


def _panels(cut, per_unit, order):
    edges = np.linspace(0.0, cut, int(cut * per_unit) + 1)
    x, w = _gauss_legendre(order)
    a, b = edges[:-1, None], edges[1:, None]
    return (0.5 * (b - a) * x + 0.5 * (b + a)).ravel(), (0.5 * (b - a) * w).ravel()


def _continuum(model, f, weight, fine: bool):
    """int_{R^d} weight(|p|) |f_hat(p)|^2 (p.Qp)/(p.Ap)^2 dp."""
    d = model.d
    cut = _P_CUTOFF[f.kind]
    if f.kind == "mollifier_bump":
        rho, wr = _panels(cut, 1.0 if fine else 0.5, 12)
        radial = float(np.sum(wr * weight(rho) * f.fourier_radial(rho) ** 2 * rho ** (d - 3)))
        ang = _angular_sphere(model.A_h, model.Q) if d == 3 else angular_integral(model.A_h, model.Q)
        return radial * ang
    if d != 3:
        raise PreconditionError("product_bump variance is implemented for d = 3 only")
    n_theta, n_phi = (64, 128) if fine else (48, 96)
    rho, wr = _panels(cut, 0.5 if fine else 0.25, 8)
    ct, wt = _gauss_legendre(n_theta)
    ph = 2 * np.pi * np.arange(n_phi) / n_phi
    st = np.sqrt(1 - ct**2)
    om = np.stack(
        [np.outer(st, np.cos(ph)), np.outer(st, np.sin(ph)), np.outer(ct, np.ones(n_phi))], axis=-1
    ).reshape(-1, 3)
    wa = np.repeat(wt, n_phi) * 2 * np.pi / n_phi
    ang = wa * np.einsum("ni,ij,nj->n", om, model.Q, om) / np.einsum("ni,ij,nj->n", om, model.A_h, om) ** 2
    wr = wr * weight(rho)
    total = 0.0
    for r, w in zip(rho, wr):
        if w == 0.0:
            continue
        fh = _fhat_fast(f, r * om)
        total += w * float(ang @ (fh * fh))
    return total


def sigma2(model: CovarianceModel, f: TestFunction, lam: float = 1.0, torus_side: float | None = None) -> Sigma2Result:
    """Limit variance of Phi(f_lam) in Fourier form.

    With ``torus_side`` the p-integral is replaced by the sum over the dual
    lattice (2 pi / side) Z^d minus the origin, i.e. the same field periodized
    on a continuum torus of that side length.
    """
    d = model.d
    if f.d != d:
        raise PreconditionError("test function and covariance model dimensions differ")
    if not lam > 0:
        raise PreconditionError("lambda must be positive")
    if not np.any(model.Q):
        return Sigma2Result(0.0, 0.0, lam, torus_side)
    # substituting p = lam k pulls out lam^(2-d)
    pref = (2 * math.pi) ** (-d) * lam ** (2 - d)
    if torus_side is not None:
        return _sigma2_torus(model, f, lam, torus_side)
    one = lambda rho: np.ones_like(rho)
    fine = pref * _continuum(model, f, one, True)
    coarse = pref * _continuum(model, f, one, False)
    return Sigma2Result(fine, abs(fine - coarse) + 1e-12 * abs(fine), lam)


def _sigma2_torus(model, f, lam, side):
    """Dual-lattice sum, split by a smooth radial partition of unity.

    The part near the origin (where the summand is singular) is summed exactly;
    the smooth remainder is replaced by its integral, which by Poisson summation
    differs from the lattice sum by a super-algebraically small amount.
    """
    d = model.d
    spacing = lam * 2 * math.pi / side  # dual lattice spacing in p = lam k
    k0 = min(max(2.0, 40.0 * spacing), _P_CUTOFF[f.kind])
    inner = lambda rho: 1.0 - _smooth_step((rho - 0.5 * k0) / (0.5 * k0))
    outer = lambda rho: _smooth_step((rho - 0.5 * k0) / (0.5 * k0))
    N = int(math.ceil(k0 / spacing))
    axis = np.arange(-N, N + 1)
    rest = np.stack(np.meshgrid(*([axis] * (d - 1)), indexing="ij"), axis=-1).reshape(-1, d - 1)
    total = 0.0
    for n1 in axis:
        p = spacing * np.concatenate([np.full((len(rest), 1), n1), rest], axis=1)
        p2 = np.sum(p * p, axis=-1)
        keep = (p2 > 0) & (p2 < k0 * k0)
        p = p[keep]
        num = np.einsum("ni,ij,nj->n", p, model.Q, p)
        den = np.einsum("ni,ij,nj->n", p, model.A_h, p)
        fh = _fhat_fast(f, p)
        total += float(np.sum(inner(np.sqrt(p2[keep])) * fh * fh * num / den**2))
    lattice = total * lam**2 / side**d
    pref = (2 * math.pi) ** (-d) * lam ** (2 - d)
    fine = pref * _continuum(model, f, outer, True)
    coarse = pref * _continuum(model, f, outer, False)
    value = lattice + fine
    return Sigma2Result(value, abs(fine - coarse) + 1e-10 * abs(value), lam, side)


# ----------------------------------------------------------------------------
# Empirical covariance and the Q fit


def autocorrelation(phi: np.ndarray) -> np.ndarray:
    """Spatial average of phi(y) phi(y + x) for every offset x, symmetrized in x."""
    import scipy.fft as sfft

    n = phi.size
    F = sfft.rfftn(phi)
    C = sfft.irfftn(F * np.conj(F), s=phi.shape) / n
    flipped = np.roll(np.flip(C), 1, axis=tuple(range(phi.ndim)))
    return 0.5 * (C + flipped)


@dataclass
class CovarianceTable:
    shape: LatticeShape
    offsets: np.ndarray  # (n, d) integer offsets in centered coordinates
    c_hat: np.ndarray
    stderr: np.ndarray
    n_replicas: int

    @property
    def radius(self) -> np.ndarray:
        return np.linalg.norm(self.offsets, axis=1)

    def rows(self):
        for off, c, se in zip(self.offsets, self.c_hat, self.stderr):
            yield [int(v) for v in off] + [float(c), float(se)]

    def header(self):
        return [f"x_{i + 1}" for i in range(self.shape.d)] + ["C_hat", "stderr"]

    def scaled(self, factor: float) -> "CovarianceTable":
        return CovarianceTable(self.shape, self.offsets, factor * self.c_hat, abs(factor) * self.stderr, self.n_replicas)


class CovarianceAccumulator:
    """Running sums of the autocorrelation inside a window of offsets.

    Replicas must be added in a fixed order for bit-reproducible tables.
    """

    def __init__(self, shape: LatticeShape, window: int | None = None, offsets=None):
        self.shape = shape
        if offsets is None:
            half = (shape.L - 1) // 2
            self.window = half if window is None else min(window, half)
            r = np.arange(-self.window, self.window + 1)
            offsets = np.stack(np.meshgrid(*([r] * shape.d), indexing="ij"), axis=-1).reshape(-1, shape.d)
        self.offsets = np.asarray(offsets, dtype=int).reshape(-1, shape.d)
        self._index = tuple((self.offsets % shape.L).T)
        self._sum = np.zeros(len(self.offsets))
        self._sumsq = np.zeros(len(self.offsets))
        self.n = 0

    def add(self, phi) -> None:
        values = phi.phi if hasattr(phi, "phi") else np.asarray(phi)
        if values.shape != self.shape.vertex_shape:
            raise PreconditionError("replicas must share one lattice shape")
        c = autocorrelation(values)[self._index]
        self._sum += c
        self._sumsq += c * c
        self.n += 1

    def table(self) -> CovarianceTable:
        n = self.n
        if n < 2:
            raise PreconditionError("empirical covariance needs at least 2 replicas")
        mean = self._sum / n
        var = np.maximum(self._sumsq - n * mean * mean, 0.0) / (n - 1)
        return CovarianceTable(self.shape, self.offsets.copy(), mean, np.sqrt(var / n), n)


def empirical_covariance(replicas, x_set=None) -> CovarianceTable:
    """Replica-averaged spatial covariance at the offsets ``x_set`` (default: all)."""
    replicas = list(replicas)
    if len(replicas) < 2:
        raise PreconditionError("empirical covariance needs at least 2 replicas")
    first = replicas[0].phi if hasattr(replicas[0], "phi") else np.asarray(replicas[0])
    shape = LatticeShape(first.ndim, first.shape[0])
    acc = CovarianceAccumulator(shape, offsets=x_set)
    for r in replicas:
        acc.add(r)
    return acc.table()


def _sym_basis(d):
    basis = []
    for j in range(d):
        for k in range(j, d):
            E = np.zeros((d, d))
            E[j, k] = E[k, j] = 1.0
            basis.append(E)
    return basis


@dataclass
class QFit:
    model: CovarianceModel
    offset: float
    residual: float
    n_points: int
    r_min: float
    r_max: float
    raw_Q: np.ndarray

    def to_dict(self) -> dict:
        return {
            **self.model.to_dict(),
            "offset": self.offset,
            "residual": self.residual,
            "n_points": self.n_points,
            "r_min": self.r_min,
            "r_max": self.r_max,
            "raw_Q": self.raw_Q.tolist(),
            "heuristic": "fitted Q is a least-squares surrogate, not the exact limit matrix",
        }


def fit_Q(
    table: CovarianceTable,
    A_h,
    r_min: float = 4.0,
    r_max: float = 10.0,
    fit_offset: bool = True,
    min_L: int = 32,
) -> QFit:
    """Weighted least-squares fit of a PSD matrix Q to the mid-range covariance shell.

    ``fit_offset`` adds a constant nuisance term absorbing the mean-zero
    constraint of the periodic corrector.
    """
    if table.shape.L < min_L:
        raise PreconditionError(f"Q fit needs a lattice with L >= {min_L}, got {table.shape.L}")
    A = np.asarray(A_h, dtype=float)
    d = A.shape[0]
    r = table.radius
    sel = (r >= r_min) & (r <= r_max)
    pts = table.offsets[sel].astype(float)
    y = table.c_hat[sel]
    basis = _sym_basis(d)
    n_par = len(basis) + (1 if fit_offset else 0)
    if len(pts) < 2 * n_par:
        raise PreconditionError(f"only {len(pts)} offsets in the shell; need at least {2 * n_par}")
    cols = [kernel_values(A, E, pts) for E in basis]
    if fit_offset:
        cols.append(np.ones(len(pts)))
    X = np.stack(cols, axis=1)
    se = table.stderr[sel]
    if np.all(se > 0):
        w = 1.0 / se**2
    else:
        w = np.linalg.norm(pts, axis=1) ** (2 * (d - 2))
    sw = np.sqrt(w / w.mean())
    coef, *_ = np.linalg.lstsq(X * sw[:, None], y * sw, rcond=None)
    raw = sum(c * E for c, E in zip(coef[: len(basis)], basis))
    vals, vecs = np.linalg.eigh(raw)
    Q = (vecs * np.clip(vals, 0.0, None)) @ vecs.T
    Q = 0.5 * (Q + Q.T)
    resid = y - X @ coef
    rms = float(np.sqrt(np.sum(w * resid**2) / np.sum(w)))
    offset = float(coef[-1]) if fit_offset else 0.0
    return QFit(CovarianceModel(A, Q), offset, rms, len(pts), r_min, r_max, raw)
