"""Run configuration: nested dataclasses, YAML I/O, dot-path overrides and validation."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .losses import WEIGHTING_MODES
from .model import GATED, INIT_MODES

TASK_LEVELS = {"intent": "sentence", "slot": "token", "lm": "token"}
ABLATIONS = ("TRIV", "ITER", "ITER+CONV", "ITER+GG", "FUL")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    tasks: list[str] = field(default_factory=lambda: ["intent", "slot"])
    shared: list[str] = field(default_factory=lambda: ["recurrent"])
    branch_depth: Any = 2  # int or {task: int}
    hidden: int = 64
    embed_dim: int = 32
    amp_width: int | None = None
    branch_kind: str = "tanh"
    routes: list[dict] = field(default_factory=lambda: [
        {"source": "slot", "target": "intent", "position": 1},
        {"source": "intent", "target": "slot", "position": 1},
    ])


@dataclass
class GateConfig:
    mode: str = "learned"
    temperature: float = 1.0
    init: float = 0.0


@dataclass
class LossSection:
    beta: float = 0.9
    conv_weight: float = 0.1
    weighting: str = "fixed"
    ema_decay: float = 0.9


@dataclass
class OptimConfig:
    name: str = "adam"
    lr: float = 1e-3
    betas: list[float] = field(default_factory=lambda: [0.9, 0.999])
    epochs: int = 10
    batch_size: int = 32


@dataclass
class DataConfig:
    source: str = "synthetic"  # "synthetic" or "path"
    path: str | None = None  # directory holding train.tsv / test.tsv
    n_train: int = 2000
    n_test: int = 500
    min_freq: int = 1
    synthetic: dict = field(default_factory=dict)  # SyntheticSpec fields


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    K: int = 4
    init: str = "random"
    gate: GateConfig = field(default_factory=GateConfig)
    loss: LossSection = field(default_factory=LossSection)
    optim: OptimConfig = field(default_factory=OptimConfig)
    seeds: list[int] = field(default_factory=lambda: [0])
    ablation: str = "FUL"
    data: DataConfig = field(default_factory=DataConfig)
    out: str = "runs/default"
    eval_every: int = 50

    # -- derived -----------------------------------------------------------
    @property
    def gated(self) -> bool:
        return self.ablation in ("ITER+GG", "FUL")

    @property
    def uses_conv(self) -> bool:
        return self.ablation in ("ITER+CONV", "FUL")

    @property
    def feedback(self) -> bool:
        return self.ablation != "TRIV"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def copy(self) -> RunConfig:
        return copy.deepcopy(self)


_SECTIONS = {"model": ModelConfig, "gate": GateConfig, "loss": LossSection, "optim": OptimConfig,
             "data": DataConfig}


def normalize_ablation(flag: str) -> str:
    f = flag.upper().replace(".", "").replace(" ", "").replace("FULL", "FUL")
    if f not in ABLATIONS:
        raise ConfigError(f"unknown ablation {flag!r}; expected one of {ABLATIONS}")
    return f


def from_dict(d: dict | None) -> RunConfig:
    d = dict(d or {})
    kwargs = {}
    for key, value in d.items():
        if key in _SECTIONS:
            cls = _SECTIONS[key]
            if not isinstance(value, dict):
                raise ConfigError(f"section {key!r} must be a mapping")
            names = {f.name for f in dataclasses.fields(cls)}
            unknown = set(value) - names
            if unknown:
                raise ConfigError(f"unknown keys in {key}: {sorted(unknown)}")
            kwargs[key] = cls(**value)
        elif key in {f.name for f in dataclasses.fields(RunConfig)}:
            kwargs[key] = value
        else:
            raise ConfigError(f"unknown config key {key!r}")
    cfg = RunConfig(**kwargs)
    cfg.ablation = normalize_ablation(cfg.ablation)
    return cfg


def load_config(path) -> RunConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return from_dict(raw)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False), encoding="utf-8")


def apply_override(cfg: RunConfig, item: str) -> RunConfig:
    """Apply one ``dot.path=value`` override; the value is parsed as YAML."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    value = yaml.safe_load(raw)
    d = cfg.to_dict()
    node = d
    parts = key.strip().split(".")
    for p in parts[:-1]:
        if not isinstance(node, dict) or p not in node:
            raise ConfigError(f"unknown config path {key!r}")
        node = node[p]
    # synthetic-generator fields are free-form; everything else must already exist
    open_section = parts[:-1] == ["data", "synthetic"]
    if not isinstance(node, dict) or (parts[-1] not in node and not open_section):
        raise ConfigError(f"unknown config path {key!r}")
    node[parts[-1]] = value
    return from_dict(d)


def apply_overrides(cfg: RunConfig, items) -> RunConfig:
    for item in items or ():
        cfg = apply_override(cfg, item)
    return cfg


def validate(cfg: RunConfig) -> RunConfig:
    """Reject configurations inconsistent with the ablation flag semantics."""
    flag = normalize_ablation(cfg.ablation)
    if not isinstance(cfg.K, int) or cfg.K < 1:
        raise ConfigError("K must be an integer >= 1")
    if flag == "TRIV" and cfg.K != 1:
        raise ConfigError(f"TRIV uses no feedback and needs K == 1 (got K={cfg.K})")
    if flag != "TRIV" and cfg.K <= 1:
        raise ConfigError(f"{flag} uses the feedback iteration and needs K > 1 (got K={cfg.K})")
    conv = cfg.loss.conv_weight
    if cfg.uses_conv and not conv > 0:
        raise ConfigError(f"{flag} includes the convergence loss but loss.conv_weight={conv}")
    if not cfg.uses_conv and conv != 0:
        raise ConfigError(f"{flag} excludes the convergence loss but loss.conv_weight={conv}")
    if not 0 < cfg.loss.beta < 1:
        raise ConfigError("loss.beta must lie in (0, 1)")
    if cfg.loss.weighting not in WEIGHTING_MODES:
        raise ConfigError(f"loss.weighting must be one of {WEIGHTING_MODES}")
    if cfg.init not in INIT_MODES:
        raise ConfigError(f"init must be one of {INIT_MODES}")
    if cfg.gate.mode not in ("verbatim", "learned"):
        raise ConfigError("gate.mode must be 'verbatim' or 'learned'")
    if cfg.gate.temperature <= 0:
        raise ConfigError("gate.temperature must be positive")
    if cfg.optim.name not in ("sgd", "adam"):
        raise ConfigError("optim.name must be 'sgd' or 'adam'")
    if cfg.optim.lr <= 0 or cfg.optim.epochs < 1 or cfg.optim.batch_size < 1:
        raise ConfigError("optim.lr, optim.epochs and optim.batch_size must be positive")
    if not cfg.seeds:
        raise ConfigError("seeds must be a nonempty list")
    if cfg.eval_every < 1:
        raise ConfigError("eval_every must be positive")

    m = cfg.model
    if not m.tasks or len(set(m.tasks)) != len(m.tasks):
        raise ConfigError("model.tasks must be a nonempty list of distinct tasks")
    for t in m.tasks:
        if t not in TASK_LEVELS:
            raise ConfigError(f"unknown task {t!r}; expected one of {sorted(TASK_LEVELS)}")
    for r in m.routes:
        src, tgt = r.get("source"), r.get("target")
        if src not in m.tasks or tgt not in m.tasks or src == tgt:
            raise ConfigError(f"route {src}->{tgt} must connect two distinct configured tasks")
        pos = r.get("position", GATED)
        if not cfg.gated:
            if not isinstance(pos, int):
                raise ConfigError(f"{flag} fixes feedback positions; route {src}->{tgt} needs an integer "
                                  f"position (got {pos!r})")
            depth = branch_depth(cfg, tgt)
            if not 1 <= pos <= depth:
                raise ConfigError(f"route {src}->{tgt} position {pos} outside [1, {depth}]")
    for t in m.tasks:
        if branch_depth(cfg, t) < 1:
            raise ConfigError(f"branch {t} needs depth >= 1")
    if cfg.data.source not in ("synthetic", "path"):
        raise ConfigError("data.source must be 'synthetic' or 'path'")
    if cfg.data.source == "path" and not cfg.data.path:
        raise ConfigError("data.source=path requires data.path")
    return cfg


def branch_depth(cfg: RunConfig, task: str) -> int:
    d = cfg.model.branch_depth
    if isinstance(d, dict):
        if task not in d:
            raise ConfigError(f"model.branch_depth has no entry for {task!r}")
        return int(d[task])
    return int(d)


def apply_ablation(base: RunConfig, flag: str, default_conv: float = 0.1, default_K: int = 4) -> RunConfig:
    """Derive a configuration for one ablation cell from a base configuration."""
    cfg = base.copy()
    flag = normalize_ablation(flag)
    cfg.ablation = flag
    if flag == "TRIV":
        cfg.K = 1
    elif cfg.K <= 1:
        cfg.K = default_K
    if cfg.uses_conv:
        if not cfg.loss.conv_weight > 0:
            cfg.loss.conv_weight = default_conv
    else:
        cfg.loss.conv_weight = 0.0
    return cfg
