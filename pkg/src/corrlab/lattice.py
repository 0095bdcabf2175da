"""Periodic lattice (Z/LZ)^d and its discrete calculus.

Vertex fields are arrays of shape ``(L,)*d``.  Edge fields are arrays of shape
``(d,) + (L,)*d`` where ``F[i][x]`` is the value on the edge from ``x`` to
``x + e_i``.  The on-disk layout is row-major in ``(x_1, ..., x_d)`` with the
direction index varying fastest, i.e. flat edge index ``vertex_index * d + i``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import PreconditionError

MAGIC = b"CORRLAB1"
_HEADER = struct.Struct("<8sIII12x")  # magic, d, L, kind, padding -> 32 bytes
KIND_VERTEX = 0
KIND_EDGE = 1
_KINDS = {"vertex": KIND_VERTEX, "edge": KIND_EDGE}


@dataclass(frozen=True)
class LatticeShape:
    d: int = 3
    L: int = 8

    def __post_init__(self):
        if self.d < 1:
            raise PreconditionError(f"dimension must be >= 1, got {self.d}")
        if self.L < 2:
            raise PreconditionError(f"side length must be >= 2, got {self.L}")

    @property
    def vertex_shape(self) -> tuple[int, ...]:
        return (self.L,) * self.d

    @property
    def edge_shape(self) -> tuple[int, ...]:
        return (self.d,) + (self.L,) * self.d

    @property
    def n_vertices(self) -> int:
        return self.L**self.d

    @property
    def n_edges(self) -> int:
        return self.d * self.L**self.d

    def wrap(self, x) -> tuple[int, ...]:
        return tuple(int(c) % self.L for c in x)

    def centered(self, x) -> np.ndarray:
        """Representative of ``x`` in the fundamental domain centered at 0."""
        x = np.asarray(x) % self.L
        return np.where(x >= (self.L + 1) // 2, x - self.L, x)

    def torus_distance(self, x, y) -> float:
        return float(np.linalg.norm(self.centered(np.asarray(x) - np.asarray(y))))


@dataclass(frozen=True)
class EdgeId:
    """Edge from ``base`` to ``base + e_dir`` (``dir`` is 0-based)."""

    base: tuple[int, ...]
    dir: int

    def head(self, shape: LatticeShape) -> tuple[int, ...]:
        h = list(self.base)
        h[self.dir] += 1
        return shape.wrap(h)

    def index(self, shape: LatticeShape):
        """Index into an edge-field array ``F[index]``."""
        return (self.dir,) + shape.wrap(self.base)

    def flat(self, shape: LatticeShape) -> int:
        v = int(np.ravel_multi_index(shape.wrap(self.base), shape.vertex_shape))
        return v * shape.d + self.dir

    @classmethod
    def from_flat(cls, k: int, shape: LatticeShape) -> "EdgeId":
        v, i = divmod(int(k), shape.d)
        base = np.unravel_index(v, shape.vertex_shape)
        return cls(tuple(int(b) for b in base), i)

    def midpoint(self, shape: LatticeShape) -> np.ndarray:
        """Midpoint in centered coordinates (used for edge-to-point distances)."""
        m = shape.centered(self.base).astype(float)
        m[self.dir] += 0.5
        return m


def all_edges(shape: LatticeShape):
    for k in range(shape.n_edges):
        yield EdgeId.from_flat(k, shape)


def edge_midpoints(shape: LatticeShape) -> np.ndarray:
    """Centered midpoints of every edge, shape ``edge_shape + (d,)``."""
    coords = centered_coords(shape)
    mids = np.broadcast_to(coords, (shape.d,) + coords.shape).astype(float).copy()
    for i in range(shape.d):
        mids[i, ..., i] += 0.5
    return mids


def centered_coords(shape: LatticeShape) -> np.ndarray:
    """Integer coordinates of every vertex in the centered fundamental domain.

    Returns an array of shape ``vertex_shape + (d,)``.
    """
    axis = shape.centered(np.arange(shape.L))
    grids = np.meshgrid(*([axis] * shape.d), indexing="ij")
    return np.stack(grids, axis=-1)


def gradient(f: np.ndarray) -> np.ndarray:
    f = np.asarray(f, dtype=float)
    return np.stack([np.roll(f, -1, axis=i) - f for i in range(f.ndim)])


def divergence(F: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`gradient`: incoming minus outgoing edge values."""
    F = np.asarray(F, dtype=float)
    out = np.zeros(F.shape[1:])
    for i in range(F.shape[0]):
        out += np.roll(F[i], 1, axis=i) - F[i]
    return out


def apply_operator(env, mu: float, u: np.ndarray) -> np.ndarray:
    """``mu*u + div(a * grad u)`` with conductances from ``env`` (or an edge array)."""
    a = env.a if hasattr(env, "a") else np.asarray(env, dtype=float)
    out = divergence(a * gradient(u))
    if mu:
        out += mu * u
    return out


def lift_vector(xi, shape: LatticeShape) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (shape.d,):
        raise PreconditionError(f"xi must have length {shape.d}")
    return np.broadcast_to(xi.reshape((shape.d,) + (1,) * shape.d), shape.edge_shape).copy()


def delta(shape: LatticeShape, x) -> np.ndarray:
    f = np.zeros(shape.vertex_shape)
    f[shape.wrap(x)] = 1.0
    return f


def edge_indicator(shape: LatticeShape, e: EdgeId) -> np.ndarray:
    F = np.zeros(shape.edge_shape)
    F[e.index(shape)] = 1.0
    return F


def vertex_inner(f, g) -> float:
    return float(np.vdot(f, g))


def edge_inner(F, G) -> float:
    return float(np.vdot(F, G))


def edge_to_flat_layout(F: np.ndarray) -> np.ndarray:
    """(d, L, ..., L) -> 1-D array in (x_1..x_d, dir) row-major order."""
    return np.moveaxis(np.asarray(F), 0, -1).reshape(-1)


def edge_from_flat_layout(flat: np.ndarray, shape: LatticeShape) -> np.ndarray:
    return np.moveaxis(np.asarray(flat).reshape(shape.vertex_shape + (shape.d,)), -1, 0).copy()


def write_field(path, values: np.ndarray, kind: str) -> None:
    """Binary dump: 32-byte header then little-endian float64 values."""
    values = np.asarray(values, dtype=float)
    if kind == "vertex":
        d, L = values.ndim, values.shape[0]
        body = values.reshape(-1)
    elif kind == "edge":
        d, L = values.shape[0], values.shape[1]
        body = edge_to_flat_layout(values)
    else:
        raise PreconditionError(f"unknown field kind {kind!r}")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, d, L, _KINDS[kind]))
        fh.write(body.astype("<f8").tobytes())


def read_field(path) -> tuple[np.ndarray, LatticeShape, str]:
    raw = Path(path).read_bytes()
    magic, d, L, kind_code = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise PreconditionError(f"{path}: bad magic {magic!r}")
    shape = LatticeShape(d, L)
    body = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).astype(float)
    if kind_code == KIND_VERTEX:
        return body.reshape(shape.vertex_shape), shape, "vertex"
    if kind_code == KIND_EDGE:
        return edge_from_flat_layout(body, shape), shape, "edge"
    raise PreconditionError(f"{path}: unknown kind code {kind_code}")
