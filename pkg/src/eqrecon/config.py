"""Flat ``section.key = value`` run configuration.

Every default of the dataset, model, loss, view, training and probe
configs has a key here.  Files hold one ``key = value`` per line; ``#``
starts a comment.  Pairs are written ``lo,hi`` and family lists
``rotation,color``.
"""

from __future__ import annotations

import dataclasses
import os
from pathlib import Path
from typing import Any, Iterable, Union

from .dataset import MiniIEBenchConfig
from .evaluate import ProbeConfig
from .losses import LossWeights
from .model import DecoderConfig, EncoderConfig, HeadConfig, ModelConfig
from .train import TrainConfig
from .views import DEFAULT_RANGES, FAMILIES, SpecError, TransformSpec

PathLike = Union[str, os.PathLike]


class ConfigError(ValueError):
    pass


_SECTIONS = {
    "data": MiniIEBenchConfig,
    "encoder": EncoderConfig,
    "head": HeadConfig,
    "decoder": DecoderConfig,
    "loss": LossWeights,
    "probe": ProbeConfig,
}
_TRAIN_SKIP = {"weights", "views"}


def _defaults() -> dict[str, Any]:
    d: dict[str, Any] = {}
    for section, cls in _SECTIONS.items():
        for f in dataclasses.fields(cls):
            d[f"{section}.{f.name}"] = getattr(cls(), f.name)
    for f in dataclasses.fields(TrainConfig):
        if f.name not in _TRAIN_SKIP:
            d[f"train.{f.name}"] = getattr(TrainConfig(), f.name)
    d["model.seed"] = 0
    d["views.families"] = ("rotation", "color")
    d["views.flip_prob"] = 0.5
    for key, rng in DEFAULT_RANGES.items():
        d[f"views.{key}"] = tuple(rng)
    d["eval.seed"] = 0
    d["eval.families"] = ("rotation", "color")
    d["paths.data"] = ""
    d["paths.out_dir"] = ""
    d["paths.checkpoint"] = ""
    return d


DEFAULTS: dict[str, Any] = _defaults()


def _parse(key: str, text: str, default: Any) -> Any:
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [x.strip() for x in text.split(",") if x.strip()]
            if default and isinstance(default[0], str):
                return tuple(items)
            if len(items) != len(default):
                raise ValueError(f"expected {len(default)} comma-separated numbers, got {text!r}")
            return tuple(float(x) for x in items)
        return text
    except ValueError as exc:
        raise ConfigError(f"config key {key!r}: {exc}") from None


def _format(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def parse_lines(lines: Iterable[str], source: str = "<config>") -> dict[str, str]:
    out = {}
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {raw.strip()!r}")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


class RunConfig:
    def __init__(self, values: dict[str, Any] | None = None) -> None:
        self.values = dict(DEFAULTS)
        if values:
            self.update(values)

    def update(self, raw: dict[str, Any]) -> None:
        """Set keys from strings (parsed against the default's type) or
        already-typed values.  Unknown keys are rejected."""
        for key, val in raw.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            self.values[key] = _parse(key, val, DEFAULTS[key]) if isinstance(val, str) else val

    @classmethod
    def from_file(cls, path: PathLike) -> "RunConfig":
        text = Path(path).read_text()
        return cls(parse_lines(text.splitlines(), str(path)))

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def dump(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in sorted(self.values.items()))

    def _section(self, section: str, cls, skip: Iterable[str] = ()):
        kwargs = {f.name: self.values[f"{section}.{f.name}"] for f in dataclasses.fields(cls) if f.name not in skip}
        try:
            return cls(**kwargs)
        except (ValueError, TypeError) as exc:
            named = [f"{section}.{k}" for k in kwargs if k in str(exc)]
            where = named[0] if named else f"[{section}]"
            raise ConfigError(f"invalid config value for {where}: {exc}") from None

    def data_config(self) -> MiniIEBenchConfig:
        return self._section("data", MiniIEBenchConfig)

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            self._section("encoder", EncoderConfig),
            self._section("head", HeadConfig),
            self._section("decoder", DecoderConfig),
            self.values["model.seed"],
        )

    def loss_weights(self) -> LossWeights:
        return self._section("loss", LossWeights)

    def view_spec(self, families_key: str = "views.families") -> TransformSpec:
        fams = self.values[families_key]
        bad = [f for f in fams if f not in FAMILIES]
        if bad:
            raise ConfigError(f"config key {families_key!r}: unknown families {bad}")
        ranges = {k: self.values[f"views.{k}"] for k in DEFAULT_RANGES}
        try:
            return TransformSpec(tuple(fams), ranges, self.values["views.flip_prob"])
        except SpecError as exc:
            raise ConfigError(f"invalid [views] settings: {exc}") from None

    def train_config(self) -> TrainConfig:
        kwargs = {f.name: self.values[f"train.{f.name}"] for f in dataclasses.fields(TrainConfig) if f.name not in _TRAIN_SKIP}
        try:
            return TrainConfig(weights=self.loss_weights(), views=self.view_spec(), **kwargs)
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"invalid [train] settings: {exc}") from None

    def probe_config(self) -> ProbeConfig:
        return self._section("probe", ProbeConfig)
