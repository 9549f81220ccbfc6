"""Experiment configuration: a flat `key = value` text format.

Strictness is the point: unknown keys, duplicate keys, malformed lines and
type errors all fail loudly, and parse(serialize(cfg)) reproduces cfg
exactly, so the resolved config written next to a run's outputs is a
faithful record of what actually ran.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Iterable

from .losses import LossWeights, TermFlags
from .training import TrainConfig

__all__ = ["ConfigError", "ExperimentConfig", "parse_config", "serialize_config", "apply_overrides"]


class ConfigError(ValueError):
    """Bad configuration text, key, or value."""


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    epochs: int = 200
    batch_size: int = 1
    image_side: int = 64
    base_width: int = 64
    latent_channels: int = 256
    n_res_blocks: int = 9
    disc_layers: int = 0  # 0 = deepest stack that fits image_side
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lambda_gan: float = 1.0
    lambda_id: float = 3.0
    lambda_ctc: float = 3.0
    lambda_zid: float = 6.0
    lambda_zcyc: float = 6.0
    enable_gan: bool = True
    enable_id: bool = True
    enable_ctc: bool = True
    enable_zid: bool = True
    enable_zcyc: bool = True
    history_capacity: int = 50
    checkpoint_every: int = 0  # 0 = final checkpoint only

    def validate(self) -> "ExperimentConfig":
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        for name in ("beta1", "beta2"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ConfigError(f"{name} must be in [0, 1), got {v}")
        for f in dataclasses.fields(self):
            if f.name.startswith("lambda_") and getattr(self, f.name) < 0:
                raise ConfigError(f"{f.name} must be >= 0, got {getattr(self, f.name)}")
        if self.history_capacity < 0:
            raise ConfigError(f"history_capacity must be >= 0, got {self.history_capacity}")
        if self.checkpoint_every < 0:
            raise ConfigError(f"checkpoint_every must be >= 0, got {self.checkpoint_every}")
        if self.image_side < 8 or self.image_side % 4 != 0:
            raise ConfigError(f"image_side must be a multiple of 4 and >= 8, got {self.image_side}")
        return self

    def to_train_config(self) -> TrainConfig:
        self.validate()
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            image_side=self.image_side,
            seed=self.seed,
            base_width=self.base_width,
            latent_channels=self.latent_channels,
            n_res_blocks=self.n_res_blocks,
            disc_layers=self.disc_layers,
            lr=self.lr,
            beta1=self.beta1,
            beta2=self.beta2,
            adam_eps=self.adam_eps,
            weights=LossWeights(gan=self.lambda_gan, id=self.lambda_id, ctc=self.lambda_ctc,
                                zid=self.lambda_zid, zcyc=self.lambda_zcyc),
            flags=TermFlags(gan=self.enable_gan, id=self.enable_id, ctc=self.enable_ctc,
                            zid=self.enable_zid, zcyc=self.enable_zcyc),
            history_capacity=self.history_capacity,
            checkpoint_every=self.checkpoint_every,
        )


_FIELDS = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}


def _parse_value(key: str, raw: str):
    kind = _FIELDS[key]
    raw = raw.strip()
    if kind == "bool":
        if raw == "true":
            return True
        if raw == "false":
            return False
        raise ConfigError(f"{key}: expected true or false, got {raw!r}")
    try:
        if kind == "int":
            return int(raw)
        return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected {kind}, got {raw!r}") from None


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v)


def parse_config(text: str) -> ExperimentConfig:
    """Parse `key = value` lines; '#' starts a comment, blanks are skipped."""
    seen: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line.strip()!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        seen[key] = _parse_value(key, raw)
    return ExperimentConfig(**seen).validate()


def serialize_config(cfg: ExperimentConfig) -> str:
    lines = [f"{f.name} = {_format_value(getattr(cfg, f.name))}" for f in dataclasses.fields(cfg)]
    return "\n".join(lines) + "\n"


def apply_overrides(cfg: ExperimentConfig, overrides: Iterable[str]) -> ExperimentConfig:
    """Apply command-line `key=value` overrides on top of a parsed config."""
    updates: dict[str, object] = {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = (part.strip() for part in item.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"unknown key {key!r}")
        updates[key] = _parse_value(key, raw)
    return dataclasses.replace(cfg, **updates).validate()
