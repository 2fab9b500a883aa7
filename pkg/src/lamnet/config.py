"""Flat ``key = value`` run files covering model, optimizer and dataset settings."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

from .fsa import FocalSpec
from .model import LamNetConfig
from .trainer import TrainConfig


@dataclass(frozen=True)
class DataConfig:
    hr_dir: Optional[str] = None  # unset: generate synthetic scenes
    lr_dir: Optional[str] = None  # unset with hr_dir: bicubic-downscale the HR images
    synthetic_images: int = 8
    synthetic_size: int = 96  # LR side of each synthetic scene
    augment: bool = True
    fixed_batch: bool = False  # reuse the first batch every step
    eval_every: int = 0


@dataclass(frozen=True)
class RunConfig:
    model: LamNetConfig = field(default_factory=LamNetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)


# key -> (section, attribute, kind)
_MODEL_KEYS = {
    "scale": "int", "channels": "int", "num_blocks": "int", "pairs_per_block": "int", "groups": "int",
    "csm_hidden_ratio": "float", "weights_softmax": "bool", "bias": "bool", "use_iem": "bool",
    "dtype": "str", "branch_init_gain": "float", "recon_init_gain": "float",
}
_TRAIN_KEYS = {
    "lr0": "float", "eps": "float", "milestones": "floats", "total_steps": "int",
    "batch_size": "int", "patch": "int", "seed": "int", "checkpoint_every": "int",
}
_DATA_KEYS = {
    "hr_dir": "path", "lr_dir": "path", "synthetic_images": "int", "synthetic_size": "int",
    "augment": "bool", "fixed_batch": "bool", "eval_every": "int",
}
KEYS = (
    ["strides", "steps"] + list(_MODEL_KEYS) + ["beta1", "beta2"] + list(_TRAIN_KEYS) + list(_DATA_KEYS)
)


class ConfigError(ValueError):
    pass


def _parse_value(key: str, kind: str, text: str):
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "bool":
            low = text.lower()
            if low not in ("true", "false"):
                raise ValueError("expected true or false")
            return low == "true"
        if kind in ("ints", "floats"):
            conv = int if kind == "ints" else float
            return tuple(conv(v) for v in text.split(",") if v.strip())
        if kind == "path":
            return text or None
        return text
    except ValueError as e:
        raise ConfigError(f"{key}: cannot parse {text!r} ({e})") from None


def _emit_value(kind: str, value) -> str:
    if kind == "bool":
        return "true" if value else "false"
    if kind in ("ints", "floats"):
        return ",".join(repr(v) for v in value)
    if kind == "float":
        return repr(float(value))
    if kind == "path":
        return value or ""
    return str(value)


def _kind(key: str) -> str:
    if key in ("strides", "steps"):
        return "ints"
    if key in ("beta1", "beta2"):
        return "float"
    for table in (_MODEL_KEYS, _TRAIN_KEYS, _DATA_KEYS):
        if key in table:
            return table[key]
    raise ConfigError(f"unknown config key {key!r}")


def parse_pairs(items) -> dict:
    """``[(key, raw_text), ...]`` to typed values; unknown keys and repeats are rejected."""
    values = {}
    for key, text in items:
        kind = _kind(key)
        if key in values:
            raise ConfigError(f"duplicate key {key!r}")
        values[key] = _parse_value(key, kind, text.strip())
    return values


def from_values(values: dict, base: RunConfig = RunConfig()) -> RunConfig:
    m = {k: values[k] for k in _MODEL_KEYS if k in values}
    t = {k: values[k] for k in _TRAIN_KEYS if k in values}
    if "beta1" in values or "beta2" in values:
        t["betas"] = (values.get("beta1", base.train.betas[0]), values.get("beta2", base.train.betas[1]))
    d = {k: values[k] for k in _DATA_KEYS if k in values}
    try:
        focal = base.model.focal
        if "strides" in values or "steps" in values:
            focal = FocalSpec(values.get("strides", focal.strides), values.get("steps", focal.steps))
        return RunConfig(
            dataclasses.replace(base.model, focal=focal, **m),
            dataclasses.replace(base.train, **t),
            dataclasses.replace(base.data, **d),
        )
    except ValueError as e:
        raise ConfigError(str(e)) from None


def parse(text: str, base: RunConfig = RunConfig()) -> RunConfig:
    """Read a run file: ``key = value`` per line, ``#`` starts a comment, blank lines ignored."""
    items = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = line.split("=", 1)
        items.append((key.strip(), value))
    return from_values(parse_pairs(items), base)


def to_values(cfg: RunConfig) -> dict:
    out = {"strides": cfg.model.focal.strides, "steps": cfg.model.focal.steps}
    out.update({k: getattr(cfg.model, k) for k in _MODEL_KEYS})
    out["beta1"], out["beta2"] = cfg.train.betas
    out.update({k: getattr(cfg.train, k) for k in _TRAIN_KEYS})
    out.update({k: getattr(cfg.data, k) for k in _DATA_KEYS})
    return out


def emit(cfg: RunConfig) -> str:
    return "".join(f"{k} = {_emit_value(_kind(k), v)}\n" for k, v in to_values(cfg).items())


def load(path) -> RunConfig:
    with open(path, encoding="utf-8") as f:
        return parse(f.read())
