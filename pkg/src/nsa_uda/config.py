"""Run configuration: nested dataclasses addressed by flat dotted keys.

File format, one setting per line::

    # comment
    loss.gamma_lid = 0.006
    stages.s1.iterations = 2000

Unknown keys and unparsable values are errors.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Tuple

from .disturbance import DisturbanceConfig
from .graph import GraphConfig
from .losses import LossConfig, WeightConfig
from .synthetic import SyntheticSceneSpec


class ConfigError(ValueError):
    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(message)
        self.key = key


@dataclass
class ModelConfig:
    num_classes: int = 3
    width: int = 32
    instance_head: bool = True


@dataclass
class EmaConfig:
    delta: float = 0.97


@dataclass
class OptimConfig:
    lr: float = 3e-4
    momentum: float = 0.9
    weight_decay: float = 1e-4


@dataclass
class PseudoConfig:
    threshold: float = 0.25
    ignore_threshold: float = 0.01
    nms_iou: float = 0.5
    refresh_interval: int = 500


@dataclass
class StageOneConfig:
    iterations: int = 2000
    batch_size: int = 8
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    warmup: int = 100
    scale_max: float = 2.0


@dataclass
class StageConfig:
    iterations: int = 1000
    batch_size: int = 4


@dataclass
class StagesConfig:
    s1: StageOneConfig = field(default_factory=StageOneConfig)
    s2: StageConfig = field(default_factory=lambda: StageConfig(iterations=2000))
    s3: StageConfig = field(default_factory=StageConfig)


@dataclass
class DatasetConfig(SyntheticSceneSpec):
    root: str = "data/synthetic"
    seed: int = 0


@dataclass
class TrainConfig:
    run_dir: str = "runs/default"
    checkpoint_interval: int = 500
    log_interval: int = 10


@dataclass
class EvalConfig:
    score_thresh: float = 0.05
    iou: float = 0.5
    split: str = "target_eval"


@dataclass
class RunConfig:
    seed: int = 0
    single_thread: bool = True
    model: ModelConfig = field(default_factory=ModelConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    disturbance: DisturbanceConfig = field(default_factory=DisturbanceConfig)
    weights: WeightConfig = field(default_factory=WeightConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    ema: EmaConfig = field(default_factory=EmaConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    pseudo: PseudoConfig = field(default_factory=PseudoConfig)
    graph: GraphConfig = field(default_factory=GraphConfig)
    stages: StagesConfig = field(default_factory=StagesConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def flatten(self) -> Dict[str, Any]:
        return dict(_walk(self, ""))

    def set(self, key: str, value: Any) -> None:
        obj, name = _resolve(self, key)
        current = getattr(obj, name)
        setattr(obj, name, _coerce(key, current, value, _field_type(obj, name)))

    def dumps(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in sorted(self.flatten().items()))

    def validate(self) -> "RunConfig":
        try:
            self.disturbance.validate()
            self.dataset.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if not 0.0 <= self.ema.delta <= 1.0:
            raise ConfigError("ema.delta must lie in [0, 1]", "ema.delta")
        if self.model.num_classes != self.dataset.num_classes:
            raise ConfigError("model.num_classes must match dataset.num_classes", "model.num_classes")
        if not self.weights.eta1 < self.weights.eta2:
            raise ConfigError("weights.eta1 must be below weights.eta2", "weights.eta1")
        return self


def _walk(obj, prefix) -> Iterable[Tuple[str, Any]]:
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(value):
            yield from _walk(value, key + ".")
        else:
            yield key, value


def _resolve(root, key: str):
    parts = key.strip().split(".")
    obj = root
    for i, part in enumerate(parts):
        names = {f.name for f in dataclasses.fields(obj)}
        if part not in names:
            raise ConfigError(f"unknown config key {key!r}", key)
        if i == len(parts) - 1:
            if dataclasses.is_dataclass(getattr(obj, part)):
                raise ConfigError(f"{key!r} names a section, not a setting", key)
            return obj, part
        obj = getattr(obj, part)
        if not dataclasses.is_dataclass(obj):
            raise ConfigError(f"unknown config key {key!r}", key)
    raise ConfigError(f"unknown config key {key!r}", key)


def _field_type(obj, name):
    for f in dataclasses.fields(obj):
        if f.name == name:
            return str(f.type)
    return ""


def _coerce(key, current, value, type_name: str):
    if not isinstance(value, str):
        return value
    raw = value.strip()
    try:
        if isinstance(current, bool) or type_name == "bool":
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(current, int) or type_name == "int":
            return int(raw)
        if isinstance(current, float) or type_name == "float":
            return float(raw)
        if "Tuple" in type_name or isinstance(current, tuple):
            if raw.lower() in ("none", ""):
                return None
            return tuple(int(v) for v in raw.split(","))
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {key}", key) from None
    return raw


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if v is None:
        return "none"
    return repr(v) if isinstance(v, float) else str(v)


def parse_config_text(text: str, base: Optional[RunConfig] = None) -> RunConfig:
    cfg = base or RunConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        cfg.set(key, value)
    return cfg


def load_config(path=None, overrides: Optional[Dict[str, str]] = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        cfg = parse_config_text(Path(path).read_text(encoding="utf-8"), cfg)
    for key, value in (overrides or {}).items():
        cfg.set(key, value)
    return cfg.validate()
