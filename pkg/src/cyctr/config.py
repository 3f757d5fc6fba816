"""Run configuration: nested dataclasses, loaded from JSON with ``key=value`` overrides.

Unknown keys are errors at every level, so a typo in an ablation grid fails
loudly instead of silently training the default.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Union

from .model import VARIANTS, CyCTRConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    n_classes: int = 12
    split: int = 0
    K: int = 1
    image_size: int = 64
    train_episodes: int = 2000
    test_episodes: int = 200
    # root seed of the evaluation episodes, shared by every run so variants see the same test set
    test_seed: int = 0
    # generator seed of a single episode to train on repeatedly (overfit mode)
    overfit_episode: Optional[int] = None

    def __post_init__(self):
        if self.K < 1 or self.image_size % 4 or self.image_size < 8:
            raise ConfigError("need K >= 1 and an image size that is a multiple of 4 (at least 8)")
        if self.train_episodes < 1 or self.test_episodes < 1:
            raise ConfigError("episode counts must be positive")


@dataclass
class OptimConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    # global gradient-norm clip; None disables it
    clip_norm: Optional[float] = 1.0
    # exponent of the polynomial learning-rate decay; 0 keeps the rate constant
    poly_power: float = 0.0
    steps: int = 2000
    log_every: int = 50

    def __post_init__(self):
        if self.steps < 0 or self.lr <= 0 or self.log_every < 1:
            raise ConfigError("need steps >= 0, lr > 0 and log_every >= 1")


@dataclass
class RunConfig:
    model: CyCTRConfig = field(default_factory=CyCTRConfig)
    variant: str = "cyctr"
    data: DataConfig = field(default_factory=DataConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    seed: int = 0
    out: str = "runs/default"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")

    def to_dict(self) -> Dict[str, Any]:
        d = dataclasses.asdict(self)
        d["model"]["backbone_widths"] = list(d["model"]["backbone_widths"])
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _build(cls, raw: Dict[str, Any], where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where or 'config'} must be an object, got {type(raw).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown} in {where or 'config'}; allowed: {sorted(fields)}")
    kwargs = {}
    for name, value in raw.items():
        sub = _NESTED.get((cls, name))
        kwargs[name] = _build(sub, value, f"{where}{name}.") if sub else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where or 'config'}: {exc}") from exc


_NESTED = {(RunConfig, "model"): CyCTRConfig, (RunConfig, "data"): DataConfig, (RunConfig, "optim"): OptimConfig}


def from_dict(raw: Dict[str, Any]) -> RunConfig:
    return _build(RunConfig, raw, "")


def parse_value(text: str) -> Any:
    """JSON literal if it parses (numbers, null, lists, booleans), else the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw: Dict[str, Any], overrides: Iterable[str]) -> Dict[str, Any]:
    """Apply ``a.b=value`` assignments to a nested dict, returning a new dict."""
    out = json.loads(json.dumps(raw))
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        node = out
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r}: {part} is not a section")
        node[parts[-1]] = parse_value(value)
    return out


def merge(base: Dict[str, Any], update: Dict[str, Any]) -> Dict[str, Any]:
    """Recursive dict merge; values in ``update`` win."""
    out = json.loads(json.dumps(base))
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config(
    path: Optional[Union[str, Path]] = None, overrides: Iterable[str] = (), base: Optional[Dict[str, Any]] = None
) -> RunConfig:
    raw: Dict[str, Any] = dict(base or {})
    if path is not None:
        try:
            raw = merge(raw, json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return from_dict(apply_overrides(raw, overrides))
