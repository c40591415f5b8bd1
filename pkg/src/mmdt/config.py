"""Flat ``section.key = value`` run configuration.

Sections map onto the config dataclasses:

    train.*      TrainConfig (without the loss weights)
    loss.*       LossWeights
    backbone.*   BackboneConfig
    finetune.*   FinetuneConfig
    recapture.*  RecaptureParams
    synth.*      synthetic dataset size

Tuples are written comma separated, ``none`` clears an optional value and
lines starting with ``#`` are ignored. Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .classifier import BackboneConfig, FinetuneConfig
from .data import RecaptureParams
from .errors import ParamError
from .objectives import LossWeights
from .trainer import TrainConfig


@dataclass
class SynthConfig:
    n_per_class: int = 64
    height: int = 224
    width: int = 224


# Fields whose default is None; everything else is typed from its default value.
_OPTIONAL_STR = {("backbone", "pretrained_weights")}


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    recapture: RecaptureParams = field(default_factory=RecaptureParams)
    synth: SynthConfig = field(default_factory=SynthConfig)

    def train_config(self) -> TrainConfig:
        """TrainConfig with the loss section folded in."""
        return dataclasses.replace(self.train, weights=self.loss)

    def items(self):
        """(dotted key, value) for every configurable field, in declaration order."""
        for section in _sections():
            obj = getattr(self, section)
            for f in dataclasses.fields(obj):
                if section == "train" and f.name == "weights":
                    continue
                yield f"{section}.{f.name}", getattr(obj, f.name)

    def dumps(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.items())

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")


def _sections():
    return [f.name for f in dataclasses.fields(RunConfig)]


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    return str(value)


def _parse_scalar(text: str, kind: type, key: str):
    try:
        if kind is bool:
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text
    except ValueError:
        raise ParamError(f"{key}: cannot parse {text!r} as {kind.__name__}") from None


def _parse(text: str, default, key: str, optional: bool):
    text = text.strip()
    if optional and text.lower() == "none":
        return None
    if optional:
        return text
    if isinstance(default, tuple):
        kind = type(default[0]) if default else str
        parts = [p.strip() for p in text.split(",") if p.strip()]
        return tuple(_parse_scalar(p, kind, key) for p in parts)
    return _parse_scalar(text, type(default), key)


def parse_config(text: str, base: RunConfig = None) -> RunConfig:
    cfg = base or RunConfig()
    updates = {s: {} for s in _sections()}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        section, dot, name = key.partition(".")
        if not sep or not dot:
            raise ParamError(f"line {lineno}: expected 'section.key = value', got {raw!r}")
        if section not in updates:
            raise ParamError(f"line {lineno}: unknown section {section!r}")
        obj = getattr(cfg, section)
        names = {f.name for f in dataclasses.fields(obj)} - ({"weights"} if section == "train" else set())
        if name not in names:
            raise ParamError(f"line {lineno}: unknown key {key!r}")
        updates[section][name] = _parse(value, getattr(obj, name), key, (section, name) in _OPTIONAL_STR)
    out = {}
    for section, changes in updates.items():
        out[section] = dataclasses.replace(getattr(cfg, section), **changes) if changes else getattr(cfg, section)
    run = RunConfig(**out)
    run.train_config().validate()
    run.backbone.validate()
    run.finetune.validate()
    run.recapture.validate()
    return run


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))
