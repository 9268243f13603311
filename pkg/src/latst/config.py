"""Flat ``key = value`` run configuration."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .data import WindowSpec
from .errors import ConfigError
from .model import ModelConfig
from .training import Schedule

SYNTHETIC = "synthetic"
_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


@dataclass
class RunConfig:
    data: str = SYNTHETIC
    date_column: str = "date"
    split: str = "generic"
    lookback: int = 336
    horizon: int = 96
    window_stride: int = 1
    patch_len: int = 16
    patch_stride: int = 8
    model_dim: int = 16
    ffn_dim: int = 128
    num_heads: int = 4
    ffn_activation: str = "prelu"
    logit_smoothing: bool = True
    softmax_kind: str = "stable"
    revin_affine: bool = True
    revin_eps: float = 1e-5
    dropout: float = 0.2
    head_dropout: float = 0.0
    positional_embedding: bool = True
    batch_size: int = 8
    epochs: int = 100
    patience: int = 10
    lr: float = 1e-4
    lr_decay: float = 1.0
    clip_grad: float = 0.0
    max_batches_per_epoch: int = 0
    seed: int = 2021
    raw_scale: bool = False
    out_dir: str = "runs/latst"

    def window_spec(self) -> WindowSpec:
        return WindowSpec(self.lookback, self.horizon, self.window_stride)

    def model_config(self, channels: int) -> ModelConfig:
        names = {f.name for f in fields(ModelConfig)} - {"channels"}
        return ModelConfig(channels=channels, **{n: getattr(self, n) for n in names})

    def schedule(self) -> Schedule:
        names = {f.name for f in fields(Schedule)}
        return Schedule(**{n: getattr(self, n) for n in names})

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self, exclude: tuple[str, ...] = ()) -> str:
        return "".join(f"{f.name} = {format_value(getattr(self, f.name))}\n"
                       for f in fields(self) if f.name not in exclude)


FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def coerce(key: str, raw: str):
    if key not in FIELD_TYPES:
        raise ConfigError(f"unknown key {key!r}")
    kind = FIELD_TYPES[key]
    text = raw.strip()
    try:
        if kind == "bool":
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
    except ValueError:
        raise ConfigError(f"invalid {kind} value {raw!r} for key {key!r}") from None
    return text


def parse_text(text: str, source: str = "<config>") -> dict[str, object]:
    """Parse ``key = value`` lines; ``#`` starts a comment. Returns only the keys present."""
    out: dict[str, object] = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{source}:{line_no}: expected 'key = value', got {line.strip()!r}")
        key, value = (s.strip() for s in body.split("=", 1))
        try:
            out[key] = coerce(key, value)
        except ConfigError as e:
            raise ConfigError(f"{source}:{line_no}: {e}") from None
    return out


def load_file(path) -> dict[str, object]:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {p}: {e}") from e
    return parse_text(text, str(p))
