"""Experiment config files: schema, YAML loading with line-anchored errors, suite expansion."""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Literal, Optional

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .datagen import FederatedTask, gen_classification, gen_quadratic_centers, partition
from .federation import RoundConfig
from .linalg import make_rng
from .models import build_model
from .preconditioners import OptimizerHyper, default_hyper

DEFAULT_BETA_GRID = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
_DATA_TAG = 7


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class TaskSpec(_Strict):
    model: Literal["quadratic", "logistic", "mlp"] = "logistic"
    n_features: int = Field(20, ge=1)
    n_classes: int = Field(10, ge=2)
    hidden: int = Field(16, ge=1)
    n_train: int = Field(2000, ge=1)
    n_test: int = Field(500, ge=1)
    separation: float = Field(3.0, ge=0.0)
    alpha: Optional[float] = Field(0.05, gt=0.0)
    # quadratic only: parameter matrix shape, Hessian condition number, center noise
    shape: tuple[int, int] = (4, 4)
    condition: float = Field(10.0, ge=1.0)
    noise: float = Field(1.0, ge=0.0)


class HyperSpec(_Strict):
    beta1: Optional[float] = None
    beta2: Optional[float] = None
    eps: Optional[float] = None
    clip_rho: Optional[float] = None
    precond_freq: Optional[int] = None
    hessian_freq: Optional[int] = None
    ns_steps: Optional[int] = None
    ns_variant: Optional[Literal["quintic", "classic"]] = None
    dim_scaling: Optional[bool] = None
    bias_correction: Optional[bool] = None

    def build(self, variant: str) -> OptimizerHyper:
        return default_hyper(variant, **self.model_dump(exclude_none=True))


class SuiteSpec(_Strict):
    kind: Literal["single", "beta_sweep", "ablation"] = "single"
    betas: list[float] = Field(default_factory=lambda: list(DEFAULT_BETA_GRID))

    @field_validator("betas")
    @classmethod
    def _betas_in_range(cls, v):
        if not v:
            raise ValueError("betas must be non-empty")
        for b in v:
            if not 0.0 <= b <= 1.0:
                raise ValueError("beta_mix out of [0,1]")
        return v


class ExperimentConfig(_Strict):
    name: str = "experiment"
    task: TaskSpec = Field(default_factory=TaskSpec)
    engine: Literal["fedavg", "fedsoa", "fedpac"] = "fedpac"
    optimizer: Literal["sophia", "muon", "soap"] = "soap"
    hyper: HyperSpec = Field(default_factory=HyperSpec)
    n_clients: int = Field(10, ge=1)
    participation: int = Field(5, ge=1)
    local_steps: int = Field(20, ge=1)
    rounds: int = Field(50, ge=1)
    local_lr: float = Field(0.003, gt=0.0)
    server_lr: float = Field(1.0, gt=0.0)
    beta_mix: float = 0.5
    align_states: bool = True
    correct_updates: bool = True
    compress: Optional[float] = Field(None, gt=0.0, le=1.0)
    weight_decay: float = Field(0.01, ge=0.0)
    batch_size: int = Field(32, ge=1)
    lr_schedule: Literal["constant", "cosine"] = "constant"
    persist_local_state: bool = False
    seeds: list[int] = Field(default_factory=lambda: [42])
    target_loss: Optional[float] = None
    output: str = "runs"
    suite: SuiteSpec = Field(default_factory=SuiteSpec)

    @field_validator("beta_mix")
    @classmethod
    def _beta_range(cls, v):
        if not 0.0 <= v <= 1.0:
            raise ValueError("beta_mix out of [0,1]")
        return v

    @field_validator("seeds")
    @classmethod
    def _seeds_nonempty(cls, v):
        if not v:
            raise ValueError("seeds must be non-empty")
        return v

    @model_validator(mode="after")
    def _cross_checks(self):
        if self.participation > self.n_clients:
            raise ValueError(f"participation S={self.participation} exceeds n_clients N={self.n_clients}")
        if self.task.n_train < self.n_clients:
            raise ValueError(f"task.n_train={self.task.n_train} is smaller than n_clients={self.n_clients}")
        return self

    def round_config(self, seed: int, threads: int = 1, **overrides) -> RoundConfig:
        cfg = RoundConfig(
            n_clients=self.n_clients,
            participation=self.participation,
            local_steps=self.local_steps,
            rounds=self.rounds,
            local_lr=self.local_lr,
            server_lr=self.server_lr,
            beta_mix=self.beta_mix,
            align_states=self.align_states,
            correct_updates=self.correct_updates,
            compress=self.compress,
            weight_decay=self.weight_decay,
            batch_size=self.batch_size,
            seed=seed,
            optimizer=self.optimizer,
            hyper=self.hyper.build(self.optimizer),
            lr_schedule=self.lr_schedule,
            persist_local_state=self.persist_local_state,
            threads=threads,
        )
        return replace(cfg, **overrides) if overrides else cfg


class ConfigError(ValueError):
    """Config failed to parse or validate; ``diagnostics`` holds one message per problem."""

    def __init__(self, diagnostics: list[str]):
        super().__init__("\n".join(diagnostics))
        self.diagnostics = diagnostics


# -- YAML with positions ---------------------------------------------------

def _key_lines(node, prefix=(), out=None) -> dict:
    """Map each key path in a composed YAML tree to its 1-based line."""
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            path = prefix + (k.value,)
            out[path] = k.start_mark.line + 1
            _key_lines(v, path, out)
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            path = prefix + (i,)
            out[path] = v.start_mark.line + 1
            _key_lines(v, path, out)
    return out


def _line_for(loc: tuple, lines: dict) -> int | None:
    loc = tuple(loc)
    while loc:
        if loc in lines:
            return lines[loc]
        loc = loc[:-1]
    return None


def _raw_cross_checks(data: dict) -> list[str]:
    defaults = ExperimentConfig.model_fields
    N = data.get("n_clients", defaults["n_clients"].default)
    S = data.get("participation", defaults["participation"].default)
    if isinstance(N, int) and isinstance(S, int) and S > N:
        return [f"participation S={S} exceeds n_clients N={N}"]
    return []


def _blame(msg: str) -> tuple:
    """Key to anchor a model-level message to."""
    for key in ("participation", "n_clients", "task"):
        if key in msg:
            return (key,)
    return ()


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    try:
        node = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as err:
        mark = getattr(err, "problem_mark", None)
        where = f"{source}:{mark.line + 1}" if mark is not None else source
        raise ConfigError([f"{where}: YAML syntax error: {getattr(err, 'problem', err)}"]) from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError([f"{source}:1: top level must be a mapping"])
    lines = _key_lines(node) if node is not None else {}
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as err:
        diags = []
        model_level = False
        for e in err.errors():
            loc = tuple(e["loc"])
            model_level |= loc == ()
            msg = e["msg"]
            if msg.startswith("Value error, "):
                msg = msg[len("Value error, "):]
            line = _line_for(loc or _blame(msg), lines)
            where = f"{source}:{line}" if line is not None else source
            diags.append(f"{where}: {'.'.join(str(p) for p in loc) or '<root>'}: {msg}")
        # pydantic skips model-level checks once a field fails; report them anyway
        if not model_level:
            for msg in _raw_cross_checks(data):
                line = _line_for(_blame(msg), lines)
                diags.append(f"{source}:{line}: <root>: {msg}" if line else f"{source}: <root>: {msg}")
        raise ConfigError(diags) from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as err:
        raise ConfigError([f"{path}: cannot read: {err.strerror}"]) from None
    return parse_config(text, str(path))


def validate_file(path) -> list[str]:
    """All diagnostics for ``path``; empty when the file is runnable."""
    try:
        load_config(path)
    except ConfigError as err:
        return err.diagnostics
    return []


# -- task construction and suites ------------------------------------------

def build_task(cfg: ExperimentConfig, seed: int) -> FederatedTask:
    t = cfg.task
    rng = make_rng(seed, _DATA_TAG)
    if t.model == "quadratic":
        d = t.shape[0] * t.shape[1]
        model = build_model("quadratic", d, shape=tuple(t.shape), hessian=np.geomspace(1.0, t.condition, d))
        train, test = gen_quadratic_centers(t.n_classes, d, t.n_train, t.n_test, t.separation, t.noise, rng)
    else:
        train, test = gen_classification(t.n_classes, t.n_features, t.n_train, t.n_test, t.separation, rng)
        model = build_model(t.model, n_features=t.n_features, n_classes=t.n_classes, hidden=t.hidden)
    shards = partition(train, cfg.n_clients, t.alpha, rng)
    return FederatedTask(model, shards, test, t.alpha)


@dataclass(frozen=True)
class Cell:
    """One (engine, overrides) variant of an experiment; run once per seed."""

    label: str
    engine: str
    overrides: tuple = ()


ABLATION_CELLS = (
    Cell("baseline", "fedsoa"),
    Cell("align_only", "fedpac", (("beta_mix", 0.0),)),
    Cell("correct_only", "fedpac", (("align_states", False),)),
    Cell("full", "fedpac"),
)


def suite_cells(cfg: ExperimentConfig) -> list[Cell]:
    kind = cfg.suite.kind
    if kind == "single":
        return [Cell(cfg.engine, cfg.engine)]
    if kind == "beta_sweep":
        return [Cell(f"beta={b:g}", "fedpac", (("beta_mix", float(b)),)) for b in cfg.suite.betas]
    return list(ABLATION_CELLS)
