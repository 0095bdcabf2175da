"""Gaussian drivers and bounded conductance laws.

Each edge carries a standard Gaussian ``zeta_e`` and the conductance
``a(e) = law(zeta_e)``.  Drivers come from a Philox counter-based stream keyed
by ``(master_seed, replica_index)``; edge ``k`` (flat layout index) always reads
raw word ``k`` of that stream, so any subset of edges can be regenerated
without touching the others.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import ndtri

from .errors import ConfigError, PreconditionError
from .lattice import EdgeId, LatticeShape, edge_from_flat_layout, read_field, write_field

LAW_KINDS = ("tanh", "affine-clamped-smooth")

# half-width (in units of zeta) of the linear ramp of the clamped law
_CLAMP_HALF_WIDTH = 2.5
_U64_TO_UNIT = 2.0**-53


@dataclass(frozen=True)
class ConductanceLaw:
    lambda_min: float = 1.0
    lambda_max: float = 4.0
    kind: str = "tanh"

    def __post_init__(self):
        if self.kind not in LAW_KINDS:
            raise ConfigError(f"unknown conductance law {self.kind!r}; expected one of {LAW_KINDS}")
        if not self.lambda_min > 0:
            raise ConfigError("lambda_min must be positive")
        # lambda_max == lambda_min is allowed: the constant environment
        if self.lambda_max < self.lambda_min:
            raise ConfigError("lambda_max must be >= lambda_min")

    @property
    def is_constant(self) -> bool:
        return self.lambda_max == self.lambda_min

    @property
    def mid(self) -> float:
        return 0.5 * (self.lambda_min + self.lambda_max)

    @property
    def half_range(self) -> float:
        return 0.5 * (self.lambda_max - self.lambda_min)

    @property
    def geometric_mean(self) -> float:
        return math.sqrt(self.lambda_min * self.lambda_max)

    def __call__(self, z, order: int = 0):
        return law_eval(self, z, order)

    def sup_derivative(self, order: int) -> float:
        """Analytic sup-norm of the first or second derivative."""
        if order not in (1, 2):
            raise PreconditionError("order must be 1 or 2")
        if self.kind == "tanh":
            # max|tanh'| = 1, max|tanh''| = 4/(3*sqrt(3)) at tanh(z) = 1/sqrt(3)
            c = 1.0 if order == 1 else 4.0 / (3.0 * math.sqrt(3.0))
            return self.half_range * c
        # quintic smoothstep S: max S' = 15/8, max |S''| = 10/sqrt(3)
        w = 2.0 * _CLAMP_HALF_WIDTH
        spread = self.lambda_max - self.lambda_min
        if order == 1:
            return spread * 15.0 / 8.0 / w
        return spread * 10.0 / math.sqrt(3.0) / w**2

    def to_dict(self) -> dict:
        return asdict(self)


def _smoothstep(t, order):
    t = np.clip(t, 0.0, 1.0)
    if order == 0:
        return t**3 * (10.0 - 15.0 * t + 6.0 * t * t)
    if order == 1:
        return 30.0 * t**2 * (1.0 - t) ** 2
    return 60.0 * t * (1.0 - t) * (1.0 - 2.0 * t)


def law_eval(law: ConductanceLaw, z, order: int = 0):
    """Conductance law value or derivative at ``z`` (scalar or array)."""
    if order not in (0, 1, 2):
        raise PreconditionError(f"order must be 0, 1 or 2, got {order}")
    z = np.asarray(z, dtype=float)
    if law.kind == "tanh":
        th = np.tanh(z)
        if order == 0:
            out = law.mid + law.half_range * th
        elif order == 1:
            out = law.half_range * (1.0 - th * th)
        else:
            out = law.half_range * (-2.0 * th * (1.0 - th * th))
    elif law.kind == "affine-clamped-smooth":
        w = 2.0 * _CLAMP_HALF_WIDTH
        t = (z + _CLAMP_HALF_WIDTH) / w
        spread = law.lambda_max - law.lambda_min
        if order == 0:
            out = law.lambda_min + spread * _smoothstep(t, 0)
        else:
            out = spread * _smoothstep(t, order) / w**order
    else:  # pragma: no cover - guarded in __post_init__
        raise ConfigError(f"unknown conductance law {law.kind!r}")
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class SeedSpec:
    master_seed: int = 0
    replica_index: int = 0

    def __post_init__(self):
        if not 0 <= self.master_seed < 2**64:
            raise ConfigError("master_seed must fit in 64 unsigned bits")
        if self.replica_index < 0:
            raise ConfigError("replica_index must be >= 0")

    @property
    def key(self) -> np.ndarray:
        return np.array([self.master_seed, self.replica_index], dtype=np.uint64)


def _raw_words(seed: SeedSpec, start: int, count: int) -> np.ndarray:
    """Raw Philox words ``start .. start+count-1`` of the replica stream."""
    block, lane = divmod(start, 4)
    bg = np.random.Philox(key=seed.key, counter=np.array([block, 0, 0, 0], dtype=np.uint64))
    return bg.random_raw(lane + count)[lane:]


def _words_to_normals(words: np.ndarray) -> np.ndarray:
    u = ((words >> np.uint64(11)).astype(np.float64) + 0.5) * _U64_TO_UNIT
    return ndtri(u)


def edge_normals(seed: SeedSpec, flat_indices) -> np.ndarray:
    """Drivers for selected flat edge indices, each read independently."""
    flat_indices = np.atleast_1d(np.asarray(flat_indices, dtype=np.int64))
    words = np.array([_raw_words(seed, int(k), 1)[0] for k in flat_indices], dtype=np.uint64)
    return _words_to_normals(words)


@dataclass(frozen=True, eq=False)
class Environment:
    shape: LatticeShape
    zeta: np.ndarray
    a: np.ndarray
    law: ConductanceLaw
    seed: SeedSpec = field(default_factory=SeedSpec)

    def __post_init__(self):
        for arr in (self.zeta, self.a):
            if arr.shape != self.shape.edge_shape:
                raise PreconditionError("environment arrays do not match the lattice shape")
            arr.flags.writeable = False

    def derivative(self, order: int) -> np.ndarray:
        """Per-edge law derivative ``a^(order)(zeta_e)``."""
        return law_eval(self.law, self.zeta, order)


def sample_environment(shape: LatticeShape, law: ConductanceLaw, seed: SeedSpec) -> Environment:
    words = _raw_words(seed, 0, shape.n_edges)
    zeta = edge_from_flat_layout(_words_to_normals(words), shape)
    return Environment(shape, zeta, law_eval(law, zeta, 0), law, seed)


def environment_from_zeta(shape: LatticeShape, law: ConductanceLaw, zeta, seed=None) -> Environment:
    zeta = np.array(zeta, dtype=float)
    return Environment(shape, zeta, law_eval(law, zeta, 0), law, seed or SeedSpec())


def constant_environment(shape: LatticeShape, c: float) -> Environment:
    law = ConductanceLaw(c, c, "tanh")
    return environment_from_zeta(shape, law, np.zeros(shape.edge_shape))


def perturb_edge(env: Environment, e: EdgeId, h: float) -> Environment:
    zeta = env.zeta.copy()
    a = env.a.copy()
    idx = e.index(env.shape)
    zeta[idx] = zeta[idx] + h
    a[idx] = law_eval(env.law, zeta[idx], 0)
    return Environment(env.shape, zeta, a, env.law, env.seed)


def perturb_direction(env: Environment, direction: np.ndarray, h: float) -> Environment:
    """Shift every driver along ``direction`` by step ``h``."""
    zeta = env.zeta + h * np.asarray(direction, dtype=float)
    return Environment(env.shape, zeta, law_eval(env.law, zeta, 0), env.law, env.seed)


def translate(env: Environment, shift) -> Environment:
    """Environment translated by a lattice vector: new(x) = old(x - shift)."""
    axes = tuple(range(1, env.shape.d + 1))
    zeta = np.roll(env.zeta, tuple(int(s) for s in shift), axis=axes)
    a = np.roll(env.a, tuple(int(s) for s in shift), axis=axes)
    return Environment(env.shape, zeta, a, env.law, env.seed)


def save_environment(env: Environment, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_field(directory / "zeta.bin", env.zeta, "edge")
    write_field(directory / "a.bin", env.a, "edge")
    sidecar = {
        "d": env.shape.d,
        "L": env.shape.L,
        "law": env.law.to_dict(),
        "seed": asdict(env.seed),
    }
    (directory / "environment.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_environment(directory) -> Environment:
    directory = Path(directory)
    meta = json.loads((directory / "environment.json").read_text())
    zeta, shape, _ = read_field(directory / "zeta.bin")
    a, _, _ = read_field(directory / "a.bin")
    return Environment(shape, zeta, a, ConductanceLaw(**meta["law"]), SeedSpec(**meta["seed"]))
