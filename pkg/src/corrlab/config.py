"""Experiment configuration: one JSON document, validated before any computation."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .environment import LAW_KINDS, ConductanceLaw
from .errors import ConfigError, PreconditionError
from .field import TEST_FUNCTION_KINDS, TestFunction, check_admissible
from .lattice import LatticeShape
from .solver import PRECONDITIONERS, SolverConfig


@dataclass
class LawSpec:
    lambda_min: float = 1.0
    lambda_max: float = 4.0
    kind: str = "tanh"


@dataclass
class SolverSpec:
    rel_tol: float = 1e-10
    max_iter: int = 2000
    preconditioner: str = "constant_coefficient_spectral"


@dataclass
class SteinSpec:
    R: int = 8
    m: int = 32
    n_groups: int = 8
    anchor_seed: int = 0
    decay: bool = False


@dataclass
class CovarianceSpec:
    window: int = 12
    r_min: float = 4.0
    r_max: float = 10.0
    fit_offset: bool = True
    A_h: list | None = None  # if absent, estimated from the replicas


@dataclass
class LemmaSpec:
    xesum_eps: list = field(default_factory=lambda: [1 / 8, 1 / 16, 1 / 32, 1 / 64])
    xesum_multiples: list = field(default_factory=lambda: [0, 1, 2, 4, 8])
    eepsum_eps: list = field(default_factory=lambda: [1 / 8, 1 / 16, 1 / 32])
    eepsum_multiples: list = field(default_factory=lambda: [0, 1, 2])
    p: float | None = None


@dataclass
class ExperimentConfig:
    d: int = 3
    L: int = 32
    law: LawSpec = field(default_factory=LawSpec)
    xi: list = field(default_factory=lambda: [1.0, 0.0, 0.0])
    mu: float = 0.0
    test_function: str = "mollifier_bump"
    eps_list: list = field(default_factory=lambda: [1 / 4, 1 / 8])
    lambda_list: list = field(default_factory=lambda: [1.0])
    p_list: list = field(default_factory=lambda: [2, 4])
    n_replicas: int = 32
    master_seed: int = 0
    n_boot: int = 1000
    solver: SolverSpec = field(default_factory=SolverSpec)
    stein: SteinSpec = field(default_factory=SteinSpec)
    covariance: CovarianceSpec = field(default_factory=CovarianceSpec)
    lemma: LemmaSpec = field(default_factory=LemmaSpec)
    output_dir: str = "runs"

    # ------------------------------------------------------------------
    @property
    def shape(self) -> LatticeShape:
        return LatticeShape(self.d, self.L)

    @property
    def conductance_law(self) -> ConductanceLaw:
        return ConductanceLaw(self.law.lambda_min, self.law.lambda_max, self.law.kind)

    @property
    def solver_config(self) -> SolverConfig:
        return SolverConfig(self.solver.rel_tol, self.solver.max_iter, self.solver.preconditioner)

    @property
    def f(self) -> TestFunction:
        return TestFunction(self.test_function, self.d)

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON, excluding where results are written."""
        body = self.to_dict()
        body.pop("output_dir")
        text = json.dumps(body, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()

    def validate(self) -> "ExperimentConfig":
        """Check types and every module guard that does not depend on the subcommand."""
        if self.d < 3:
            raise ConfigError("d must be >= 3")
        if self.L < 2:
            raise ConfigError("L must be >= 2")
        if len(self.xi) != self.d:
            raise ConfigError(f"xi must have {self.d} components")
        if self.mu < 0:
            raise ConfigError("mu must be >= 0")
        if self.law.kind not in LAW_KINDS:
            raise ConfigError(f"law kind must be one of {LAW_KINDS}")
        if self.test_function not in TEST_FUNCTION_KINDS:
            raise ConfigError(f"test_function must be one of {TEST_FUNCTION_KINDS}")
        if self.solver.preconditioner not in PRECONDITIONERS:
            raise ConfigError(f"preconditioner must be one of {PRECONDITIONERS}")
        if self.n_replicas < 2:
            raise ConfigError("n_replicas must be >= 2")
        if not self.eps_list or not self.lambda_list:
            raise ConfigError("eps_list and lambda_list must be non-empty")
        if any(not 0 < e <= 1 for e in self.eps_list):
            raise ConfigError("every eps must lie in (0, 1]")
        if any(not 0 < l <= 1 for l in self.lambda_list):
            raise ConfigError("every lambda must lie in (0, 1]")
        if any(int(p) != p or not 1 <= p <= 8 for p in self.p_list):
            raise ConfigError("p_list entries must be integers in 1..8")
        if self.n_boot < 10:
            raise ConfigError("n_boot must be >= 10")
        # construction re-validates laws and solver settings
        self.conductance_law
        self.solver_config
        for e in self.eps_list:
            for l in self.lambda_list:
                check_admissible(self.shape, l, e)
        return self

    def check_stein(self):
        if self.n_replicas < 16:
            raise PreconditionError("the Stein bound needs n_replicas >= 16 for fourth moments")
        if not 1 <= self.stein.R <= self.L / 2:
            raise PreconditionError("stein.R must lie in [1, L/2]")
        if self.stein.m < 2:
            raise PreconditionError("stein.m must be >= 2")

    def check_covariance(self):
        if self.L < 32:
            raise PreconditionError("the covariance fit needs L >= 32")


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a JSON object")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    kwargs = {}
    nested = {"law": LawSpec, "solver": SolverSpec, "stein": SteinSpec, "covariance": CovarianceSpec, "lemma": LemmaSpec}
    for k, v in data.items():
        if cls is ExperimentConfig and k in nested:
            kwargs[k] = _build(nested[k], v, k)
        else:
            kwargs[k] = v
    try:
        return cls(**kwargs)
    except TypeError as err:
        raise ConfigError(f"bad {where}: {err}") from err


def config_from_dict(data: dict) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, data, "config")
    # coerce numeric lists so hashes do not depend on int/float spelling
    try:
        cfg.xi = [float(v) for v in cfg.xi]
        cfg.eps_list = [float(v) for v in cfg.eps_list]
        cfg.lambda_list = [float(v) for v in cfg.lambda_list]
        if any(float(v) != int(float(v)) for v in cfg.p_list):
            raise ConfigError("p_list entries must be integers")
        cfg.p_list = [int(v) for v in cfg.p_list]
        cfg.mu = float(cfg.mu)
        cfg.law.lambda_min = float(cfg.law.lambda_min)
        cfg.law.lambda_max = float(cfg.law.lambda_max)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"non-numeric entry in config: {err}") from err
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError as err:
        raise ConfigError(f"config file not found: {path}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"config is not valid JSON: {err}") from err
    return config_from_dict(data)
