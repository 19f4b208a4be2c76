"""Flat ``key = value`` experiment configuration.

One setting per line, ``#`` starts a comment. Tuple-valued settings are
comma separated. Keys are the field names of :class:`ModelConfig`,
:class:`TrainConfig`, :class:`SyntheticConfig` and :class:`WindowConfig`,
plus the experiment-level keys of :class:`ExperimentConfig`. ``seed`` is
shared by every component.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field, replace
from pathlib import Path

from .data import SyntheticConfig, WindowConfig
from .model import ModelConfig, variant_flags
from .training import TrainConfig


class ConfigError(ValueError):
    pass


def parse_kv_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = value
    return out


def load_kv(path) -> dict[str, str]:
    return parse_kv_text(Path(path).read_text())


def _coerce(text: str, tp, key: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if text.lower() in ("none", ""):
            if type(None) in args:
                return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(text, inner[0], key)
    if origin is tuple:
        elem = args[0] if args else float
        items = [s.strip() for s in text.split(",") if s.strip()]
        return tuple(_coerce(s, elem, key) for s in items)
    try:
        if tp is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
        if tp is str:
            return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {tp.__name__}") from None
    raise ConfigError(f"{key}: unsupported field type {tp}")


def _fill(cls, kv: dict[str, str], used: set[str]):
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in kv:
            kwargs[f.name] = _coerce(kv[f.name], hints[f.name], f.name)
            used.add(f.name)
    return cls(**kwargs)


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    return repr(value) if isinstance(value, float) else str(value)


@dataclass
class ExperimentConfig:
    variant: str = "hrrr_lv"
    seed: int = 0
    n_train_sequences: int = 16
    n_test_sequences: int = 4
    checkpoint: str = "swa"  # which trained weights to evaluate: swa or final
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    windows: WindowConfig = field(default_factory=WindowConfig)

    def __post_init__(self):
        # the variant flag owns use_lv / use_hrrr
        self.model = replace(self.model, **variant_flags(self.variant))
        self.train = replace(self.train, seed=self.seed)
        self.synthetic = replace(self.synthetic, seed=self.seed)
        self.windows = replace(
            self.windows,
            t_in=self.model.t_in,
            t_out=self.model.t_out,
            hrrr_frames=self.model.hrrr_frames,
            seed=self.seed,
            hrrr_quality=0.9 if self.windows.hrrr_quality is None else self.windows.hrrr_quality,
        )

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "ExperimentConfig":
        used: set[str] = set()
        top = {}
        hints = typing.get_type_hints(cls)
        for name in ("variant", "seed", "n_train_sequences", "n_test_sequences", "checkpoint"):
            if name in kv:
                top[name] = _coerce(kv[name], hints[name], name)
                used.add(name)
        sub = {
            "model": _fill(ModelConfig, kv, used),
            "train": _fill(TrainConfig, kv, used),
            "synthetic": _fill(SyntheticConfig, kv, used),
            "windows": _fill(WindowConfig, kv, used),
        }
        unknown = sorted(set(kv) - used)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        if "variant" not in kv and ("use_lv" in kv or "use_hrrr" in kv):
            raise ConfigError("set `variant` instead of use_lv/use_hrrr")
        cfg = cls(**top, **sub)
        cfg.model.validate()
        return cfg

    @classmethod
    def load(cls, path, overrides: dict[str, str] | None = None) -> "ExperimentConfig":
        kv = load_kv(path) if path is not None else {}
        kv.update(overrides or {})
        return cls.from_kv(kv)

    def to_kv(self) -> dict[str, str]:
        out = {
            "variant": self.variant,
            "seed": str(self.seed),
            "n_train_sequences": str(self.n_train_sequences),
            "n_test_sequences": str(self.n_test_sequences),
            "checkpoint": self.checkpoint,
        }
        for part in (self.model, self.train, self.synthetic, self.windows):
            for f in dataclasses.fields(part):
                if f.name in out or f.name in ("use_lv", "use_hrrr"):
                    continue
                out[f.name] = _format(getattr(part, f.name))
        return out

    def dump(self, path) -> None:
        lines = [f"{k} = {v}" for k, v in self.to_kv().items()]
        Path(path).write_text("\n".join(lines) + "\n")


def toy_experiment(**kv: str) -> ExperimentConfig:
    """Toy-scale experiment: 80-pixel domain, 16-pixel target tile, 1-minute cadence."""
    base = {
        "t_in": "4",
        "t_out": "6",
        "target_size": "16",
        "down_channels": "8,16,16",
        "down_kernels": "4,3,3",
        "down_strides": "2,2,2",
        "down_paddings": "1,1,1",
        "hidden_channels": "8,16,16",
        "up_channels": "8,8,16",
        "up_kernels": "4,4,4",
        "up_strides": "2,2,2",
        "up_paddings": "1,1,1",
        "hrrr_frames": "3",
        "in_cadence_min": "1",
        "out_cadence_min": "1",
        "stride_min": "2",
        "side": "80",
        "n_frames": "20",
        "n_cells": "10",
        "velocity": "1.5,0.5",
        "velocity_jitter": "0.2",
        "learning_rate": "0.003",
        "weight_decay": "0",
        "batch_size": "8",
        "total_steps": "300",
    }
    base.update(kv)
    return ExperimentConfig.from_kv(base)
