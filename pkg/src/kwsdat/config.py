"""Run configuration: one versioned JSON document covering the whole pipeline.

Every section is a dataclass. Loading is strict: unknown keys and values of
the wrong type raise ConfigError naming the dotted key path. Dumping and
re-loading is lossless, and ``--set a.b=value`` style overrides are applied
to the dictionary form before validation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, is_dataclass, replace
from pathlib import Path

from .augment import AugmentPlan, SpecAugmentConfig
from .data import KEYWORDS
from .disnorm import Strategy, make_branch_plan
from .errors import ConfigError, ContractError
from .frontend import FrontendConfig
from .model import ModelConfig
from .trainer import TrainConfig

SCHEMA_VERSION = 1


@dataclass
class DataSection:
    dataset_dir: str | None = None
    manifest: str | None = None  # precomputed manifest JSON; skips ingestion
    keywords: list[str] = field(default_factory=lambda: list(KEYWORDS))
    unknown_words: list[str] | None = None  # None = every other word folder
    include_background: bool = True
    max_train_clips: int | None = None
    max_valid_clips: int | None = None
    max_test_clips: int | None = None
    train_noise: list[str] | None = None  # noise file names; None = all not held out
    test_noise: list[str] | None = None  # None = last two files in sorted order


@dataclass
class AugmentSection:
    datasources: list[str] = field(default_factory=lambda: ["clean", "noisy", "specaug"])
    snr_range_db: list[float] = field(default_factory=lambda: [0.0, 20.0])
    specaug: SpecAugmentConfig = field(default_factory=SpecAugmentConfig)


@dataclass
class TrainSection:
    strategy: str = "DA_DAT"
    epochs: int = 15
    base_lr: float = 0.005
    batch_size: int = 64
    adv_weight: float = 1.0
    audit: bool = False
    collapse_routing: bool = False


@dataclass
class AttackSection:
    epsilon: float | list[float] = 0.1  # a list gives FG_DAT its levels
    steps: int = 8
    step_size: float | None = None
    generation_branch: str = "adversarial"


@dataclass
class EvalSection:
    split: str = "test"
    window_frames: int = 100
    shift: int = 10
    aggregate: str = "max"
    snr_db: list[float] = field(default_factory=list)  # extra noisy test conditions
    far_target: float = 0.01
    batch_size: int = 128


def _default_model() -> ModelConfig:
    return ModelConfig(with_simam=True, num_branches=0)


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    workers: int = 1
    output_dir: str = "runs/default"
    data: DataSection = field(default_factory=DataSection)
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    model: ModelConfig = field(default_factory=_default_model)  # num_branches 0 = derive from strategy
    augment: AugmentSection = field(default_factory=AugmentSection)
    train: TrainSection = field(default_factory=TrainSection)
    attack: AttackSection = field(default_factory=AttackSection)
    eval: EvalSection = field(default_factory=EvalSection)

    # -- derived objects --------------------------------------------------------

    def num_datasources(self) -> int:
        return len(self.augment.datasources)

    def branch_plan(self):
        strategy = Strategy.parse(self.train.strategy)
        levels = len(self.attack.epsilon) if isinstance(self.attack.epsilon, list) else 1
        return make_branch_plan(strategy, self.num_datasources(), levels if strategy is Strategy.FG_DAT else 1)

    def model_config(self, num_classes: int | None = None) -> ModelConfig:
        """Model section with the branch count derived from the strategy (when 0) and the class count
        taken from the dataset label map (keywords + unknown unless given)."""
        k = self.model.num_branches or self.branch_plan().num_branches
        return replace(self.model, num_classes=num_classes or len(self.data.keywords) + 1, num_branches=k)

    def train_config(self) -> TrainConfig:
        t, a = self.train, self.attack
        return TrainConfig(strategy=t.strategy, epochs=t.epochs, base_lr=t.base_lr, batch_size=t.batch_size,
                           epsilon=a.epsilon, steps=a.steps, step_size=a.step_size, adv_weight=t.adv_weight,
                           generation_branch=a.generation_branch, seed=self.seed, audit=t.audit,
                           collapse_routing=t.collapse_routing)

    def augment_plan(self, noise_corpus) -> AugmentPlan:
        a = self.augment
        return AugmentPlan(tuple(a.snr_range_db), list(noise_corpus), a.specaug, self.seed, tuple(a.datasources))

    # -- textual form -----------------------------------------------------------

    def to_dict(self) -> dict:
        return _dump(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        version = data.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema version {version}", "schema_version")
        cfg = _load(cls, data, "")
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("top level must be an object")
        return cls.from_dict(data)

    def validate(self) -> None:
        try:
            Strategy.parse(self.train.strategy)
        except (ValueError, KeyError) as exc:
            raise ConfigError(str(exc), "train.strategy") from exc
        if self.train.epochs < 1:
            raise ConfigError("must be >= 1", "train.epochs")
        if self.train.batch_size < 1:
            raise ConfigError("must be >= 1", "train.batch_size")
        if self.eval.aggregate not in ("max", "mean"):
            raise ConfigError("must be 'max' or 'mean'", "eval.aggregate")
        if self.eval.split not in ("train", "valid", "test"):
            raise ConfigError("must be train, valid or test", "eval.split")
        if len(self.augment.snr_range_db) != 2:
            raise ConfigError("needs [low, high]", "augment.snr_range_db")
        try:
            self.augment_plan([])
            self.branch_plan()
        except ContractError as exc:
            raise ConfigError(str(exc), "train") from exc


def _dump(obj):
    if isinstance(obj, ModelConfig):
        return obj.to_dict()
    if is_dataclass(obj):
        return {f.name: _dump(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_dump(v) for v in obj]
    return obj


def _check_scalar(value, default, path: str):
    # type check against the default; a None default accepts any JSON value
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        if path.endswith("attack.epsilon") and isinstance(value, list):
            ok = bool(value) and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value)
            value = [float(v) for v in value] if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, (list, tuple)):
        ok = isinstance(value, list)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"expected {type(default).__name__}, got {type(value).__name__}", path)
    if isinstance(default, float) and isinstance(value, int):
        return float(value)
    return value


def _load(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"expected an object, got {type(data).__name__}", path or "<root>")
    if cls is ModelConfig:
        try:
            base = _dump(_default_model())
            unknown = set(data) - set(base)
            if unknown:
                raise ConfigError(f"unknown key {sorted(unknown)[0]!r}", _join(path, sorted(unknown)[0]))
            merged = {k: _check_scalar(data.get(k, v), v, _join(path, k)) for k, v in base.items()}
            return ModelConfig.from_dict(merged)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc), path) from exc
    defaults = cls()
    names = {f.name for f in fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"unknown key {key!r}", _join(path, key))
    kwargs = {}
    for f in fields(cls):
        sub = _join(path, f.name)
        default = getattr(defaults, f.name)
        if f.name not in data:
            continue
        value = data[f.name]
        if is_dataclass(default):
            kwargs[f.name] = _load(type(default), value, sub)
        else:
            kwargs[f.name] = _check_scalar(value, default, sub)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc), path or "<root>") from exc


def _join(path: str, key: str) -> str:
    return f"{path}.{key}" if path else key


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``a.b.c=value`` strings (value parsed as JSON, else taken as a string)."""
    data = json.loads(json.dumps(data))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for i, part in enumerate(parts[:-1]):
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError("not a section", ".".join(parts[: i + 1]))
        node[parts[-1]] = _parse_value(raw)
    return data


def load_config(path=None, overrides=()) -> RunConfig:
    """Defaults, then the file at ``path`` (if any), then overrides."""
    data: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} not found")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: not valid JSON: {exc}") from exc
    if overrides:
        data = apply_overrides(data, list(overrides))
    return RunConfig.from_dict(data)


__all__ = ["RunConfig", "DataSection", "AugmentSection", "TrainSection", "AttackSection", "EvalSection",
           "load_config", "apply_overrides", "SCHEMA_VERSION"]
