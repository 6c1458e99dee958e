"""JSON experiment configuration.

Every section has defaults; unknown keys and type mismatches are rejected with
an error naming the JSON path (``$.sfl.num_clients``).  ``to_dict`` gives the
fully resolved config, which is echoed next to the results.
"""
from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .models import DEFAULT_ARCH, TIERS, BottleneckConfig

MODES = ("pretrain", "transfer", "attack", "compare-defenses", "end-to-end")


@dataclass
class DatasetSpec:
    kind: str = "synthetic"  # synthetic | idx
    num_samples: int = 800
    num_classes: int = 10
    image_shape: list[int] = field(default_factory=lambda: [1, 16, 16])
    images: str | None = None
    labels: str | None = None
    limit: int | None = None
    val_fraction: float = 0.2
    seed_offset: int = 0

    def check(self, path: str) -> None:
        if self.kind not in ("synthetic", "idx"):
            raise ConfigError(f"{path}.kind: expected 'synthetic' or 'idx', got {self.kind!r}")
        if self.kind == "idx":
            for key in ("images", "labels"):
                value = getattr(self, key)
                if value is None:
                    raise ConfigError(f"{path}.{key}: required for idx datasets")
                if not Path(value).exists():
                    raise ConfigError(f"{path}.{key}: file {value!r} does not exist")
        if len(self.image_shape) != 3 or min(self.image_shape) < 1:
            raise ConfigError(f"{path}.image_shape: expected [C, H, W] with positive sizes")
        if not 0 < self.val_fraction < 1:
            raise ConfigError(f"{path}.val_fraction: must lie in (0, 1)")
        if self.num_samples < 1 or self.num_classes < 2:
            raise ConfigError(f"{path}: num_samples must be >= 1 and num_classes >= 2")


@dataclass
class ModelSpec:
    arch: str = DEFAULT_ARCH
    cut_layer: int = 2


@dataclass
class SFLSpec:
    num_clients: int = 2
    epochs: int = 20
    batch_size: int = 32
    client_lr: float = 0.05
    server_lr: float = 0.05
    momentum: float = 0.9
    sampling_rate: float = 1.0
    lr_decay: bool = True
    clip_norm: float | None = 2.0

    def check(self, path: str) -> None:
        for key in ("num_clients", "epochs", "batch_size"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{path}.{key}: must be >= 1")
        if not 0 < self.sampling_rate <= 1:
            raise ConfigError(f"{path}.sampling_rate: must lie in (0, 1]")
        if self.client_lr <= 0 or self.server_lr <= 0:
            raise ConfigError(f"{path}: learning rates must be positive")


@dataclass
class PretrainSpec:
    epochs: int = 30
    # "lambda" in JSON
    lam: float = 1.8
    bottleneck: str | None = "C4-S1"
    sim_tier: str = "L3"
    update_freq: int = 1


@dataclass
class TransferSpec:
    strategy: str = "aware_finetune"
    epochs: int = 20
    checkpoint: str | None = None
    lam: float | None = None


@dataclass
class DefenseSpec:
    method: str = "none"  # none | laplacian | dropout | topk | advnoise | distcorr
    value: float = 0.0


@dataclass
class AttackSpec:
    tiers: list[str] = field(default_factory=lambda: list(TIERS))
    epochs: list[int] | None = None
    inversion_epochs: int = 50
    batch_size: int = 32
    max_private: int | None = 256
    surrogate_epochs: int = 30


@dataclass
class ExperimentConfig:
    mode: str
    seed: int
    output_dir: str = "runs"
    threads: int = 1
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    source_dataset: DatasetSpec = field(default_factory=lambda: DatasetSpec(seed_offset=1000))
    model: ModelSpec = field(default_factory=ModelSpec)
    sfl: SFLSpec = field(default_factory=SFLSpec)
    pretrain: PretrainSpec = field(default_factory=PretrainSpec)
    transfer: TransferSpec = field(default_factory=TransferSpec)
    defense: DefenseSpec = field(default_factory=DefenseSpec)
    attack: AttackSpec = field(default_factory=AttackSpec)

    def attack_epochs(self, total: int) -> list[int]:
        if self.attack.epochs is not None:
            return list(self.attack.epochs)
        return sorted({1, max(1, total // 2), total})

    def check(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"$.mode: expected one of {MODES}, got {self.mode!r}")
        if self.threads < 1:
            raise ConfigError("$.threads: must be >= 1")
        self.dataset.check("$.dataset")
        self.source_dataset.check("$.source_dataset")
        self.sfl.check("$.sfl")
        if self.model.cut_layer < 1:
            raise ConfigError("$.model.cut_layer: must be >= 1")
        if self.pretrain.bottleneck is not None:
            try:
                BottleneckConfig.parse(self.pretrain.bottleneck)
            except ConfigError as exc:
                raise ConfigError(f"$.pretrain.bottleneck: {exc}") from None
        if self.pretrain.lam < 0:
            raise ConfigError("$.pretrain.lambda: must be non-negative")
        if self.pretrain.sim_tier not in TIERS:
            raise ConfigError(f"$.pretrain.sim_tier: expected one of {TIERS}")
        if self.pretrain.update_freq < 1 or self.pretrain.epochs < 1 or self.transfer.epochs < 1:
            raise ConfigError("$.pretrain/$.transfer: epochs and update_freq must be >= 1")
        if self.transfer.strategy not in ("freeze", "simple_finetune", "aware_finetune"):
            raise ConfigError(f"$.transfer.strategy: unknown strategy {self.transfer.strategy!r}")
        if self.transfer.checkpoint is not None and not Path(self.transfer.checkpoint).exists():
            raise ConfigError(f"$.transfer.checkpoint: file {self.transfer.checkpoint!r} does not exist")
        if self.mode == "transfer" and self.transfer.checkpoint is None:
            raise ConfigError("$.transfer.checkpoint: required in transfer mode")
        bad = [t for t in self.attack.tiers if t not in TIERS]
        if bad or not self.attack.tiers:
            raise ConfigError(f"$.attack.tiers: expected a non-empty subset of {TIERS}, got {self.attack.tiers}")
        if self.defense.method not in ("none", "laplacian", "dropout", "topk", "advnoise", "distcorr"):
            raise ConfigError(f"$.defense.method: unknown defense {self.defense.method!r}")

    def to_dict(self) -> dict:
        return _dump(self)


# JSON key -> attribute name, for keys that clash with Python keywords
_ALIASES = {"lambda": "lam"}
_REVERSE = {v: k for k, v in _ALIASES.items()}


def _dump(obj):
    if dataclasses.is_dataclass(obj):
        return {_REVERSE.get(f.name, f.name): _dump(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, list):
        return [_dump(v) for v in obj]
    return obj


def _coerce(value, hint, path: str):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, getattr(__import__("types"), "UnionType", None)):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], path)
    if dataclasses.is_dataclass(hint):
        return _build(hint, value, path)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {type(value).__name__}")
        return [_coerce(v, args[0], f"{path}[{i}]") for i, v in enumerate(value)]
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        name = _ALIASES.get(key, key)
        if name not in names:
            raise ConfigError(f"{path}.{key}: unknown field")
        kwargs[name] = _coerce(value, hints[name], f"{path}.{key}")
    missing = [f.name for f in dataclasses.fields(cls)
               if f.name not in kwargs and f.default is dataclasses.MISSING
               and f.default_factory is dataclasses.MISSING]
    if missing:
        raise ConfigError(f"{path}.{missing[0]}: required field missing")
    return cls(**kwargs)


def config_from_dict(data: dict, overrides: dict | None = None) -> ExperimentConfig:
    data = dict(data)
    for key, value in (overrides or {}).items():
        if value is not None:
            data[key] = value
    cfg = _build(ExperimentConfig, data, "$")
    cfg.check()
    return cfg


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {str(path)!r} does not exist") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(data, overrides)


def dump_config(cfg: ExperimentConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"
