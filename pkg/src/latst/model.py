"""The LATST forecaster: RevIN around one pre-norm transformer layer over patch tokens."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .attention import AttentionConfig, AttentionParams, EntropyStats, attention_entropy, attention_forward
from .errors import ConfigError, ContractError, DimensionError, DomainError, ShapeMismatchError
from .numerics import gelu, prelu, relu
from .tensor import Tensor, as_tensor, mul, reshape, sqrt, take

FFN_ACTIVATIONS = ("prelu", "relu", "gelu")
BENCHMARK_HORIZONS = (96, 192, 336, 720)
LAYER_NORM_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    channels: int
    lookback: int = 336
    horizon: int = 96
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

    def __post_init__(self):
        for name in ("channels", "lookback", "horizon", "patch_len", "patch_stride",
                     "model_dim", "ffn_dim", "num_heads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer, got {getattr(self, name)}")
        if self.patch_len > self.lookback:
            raise ConfigError(f"patch_len {self.patch_len} exceeds lookback {self.lookback}")
        if self.ffn_activation not in FFN_ACTIVATIONS:
            raise ConfigError(f"ffn_activation must be one of {FFN_ACTIVATIONS}, got {self.ffn_activation!r}")
        if not 0.0 <= self.head_dropout < 1.0:
            raise ConfigError("head_dropout must lie in [0, 1)")
        if self.revin_eps <= 0:
            raise ConfigError("revin_eps must be positive")
        self.attention  # validates heads / dropout / softmax kind

    @property
    def token_count(self) -> int:
        return (self.lookback - self.patch_len) // self.patch_stride + 1

    @property
    def attention(self) -> AttentionConfig:
        return AttentionConfig(self.model_dim, self.num_heads, self.logit_smoothing,
                               self.softmax_kind, self.dropout)

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        d, f, t = self.model_dim, self.ffn_dim, self.token_count
        shapes = {
            "revin.gamma": (self.channels,),
            "revin.beta": (self.channels,),
            "embed.W": (self.patch_len, d),
            "embed.b": (d,),
            "embed.pos": (t, d),
            "ln1.scale": (d,),
            "ln1.offset": (d,),
        }
        for role in "qkvo":
            shapes[f"attn.W_{role}"] = (d, d)
            shapes[f"attn.b_{role}"] = (d,)
        shapes.update({
            "ln2.scale": (d,),
            "ln2.offset": (d,),
            "ffn.W1": (d, f),
            "ffn.b1": (f,),
            "ffn.W2": (f, d),
            "ffn.b2": (d,),
            "ffn.prelu_slopes": (f,),
            "head.W": (t * d, self.horizon),
            "head.b": (self.horizon,),
        })
        return shapes


@dataclass
class ModelParams:
    """Named parameter tensors in a fixed order (the checkpoint order)."""

    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def items(self):
        return self.tensors.items()

    def values(self):
        return self.tensors.values()

    @property
    def attention(self) -> AttentionParams:
        return AttentionParams(**{k.split(".", 1)[1]: v for k, v in self.tensors.items()
                                  if k.startswith("attn.")})

    def copy(self) -> "ModelParams":
        return ModelParams({k: Tensor(v.data, requires_grad=v.requires_grad) for k, v in self.tensors.items()})

    def validate(self, cfg: ModelConfig) -> None:
        expected = cfg.param_shapes()
        if set(expected) != set(self.tensors):
            missing = sorted(set(expected) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(expected))
            raise ShapeMismatchError(f"parameter names differ: missing {missing}, unexpected {extra}")
        for name, shape in expected.items():
            got = self.tensors[name].shape
            if got != shape:
                raise ShapeMismatchError(
                    f"{name}: stored shape {got} but configuration expects {shape}")


class RevinStats(NamedTuple):
    mean: np.ndarray  # [batch, C]
    std: np.ndarray  # [batch, C], sqrt(var + eps)


class ForwardResult(NamedTuple):
    y_hat: Tensor
    probs: Tensor
    entropy: EntropyStats | None
    max_abs_logit: float
    nonfinite_logits: int
    nonfinite_probs: int


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    """Uniform(+-sqrt(1/fan_in)) projections, N(0, 0.02^2) positions, slopes 0.25."""
    rng = np.random.default_rng(seed)
    out: dict[str, np.ndarray] = {}
    for name, shape in cfg.param_shapes().items():
        if name == "revin.gamma" or name.endswith(".scale"):
            out[name] = np.ones(shape)
        elif name == "revin.beta" or name.endswith(".offset"):
            out[name] = np.zeros(shape)
        elif name == "embed.pos":
            out[name] = rng.normal(0.0, 0.02, shape)
        elif name == "ffn.prelu_slopes":
            out[name] = np.full(shape, 0.25)
        else:
            fan_in = _fan_in(name, cfg)
            bound = math.sqrt(1.0 / fan_in)
            out[name] = rng.uniform(-bound, bound, shape)
    return ModelParams({k: Tensor(v, requires_grad=True) for k, v in out.items()})


def _fan_in(name: str, cfg: ModelConfig) -> int:
    module = name.split(".")[0]
    if module == "embed":
        return cfg.patch_len
    if module == "attn":
        return cfg.model_dim
    if module == "head":
        return cfg.token_count * cfg.model_dim
    if name in ("ffn.W1", "ffn.b1"):
        return cfg.model_dim
    return cfg.ffn_dim


def revin_stats(x: np.ndarray, eps: float) -> RevinStats:
    mean = x.mean(axis=-1)
    var = ((x - mean[..., None]) ** 2).mean(axis=-1)
    return RevinStats(mean, np.sqrt(var + eps))


def revin_normalize(x, cfg: ModelConfig, params: ModelParams) -> tuple[Tensor, RevinStats]:
    """Per-instance, per-channel standardization over the lookback axis, then optional affine."""
    xd = as_tensor(x).data
    if xd.ndim != 3 or xd.shape[1] != cfg.channels:
        raise DimensionError(f"expected input [batch, {cfg.channels}, L], got {xd.shape}")
    if xd.shape[2] < 2:
        raise ContractError("RevIN needs at least two time steps")
    stats = revin_stats(xd, cfg.revin_eps)
    x_norm = Tensor._wrap((xd - stats.mean[..., None]) / stats.std[..., None])
    if cfg.revin_affine:
        c = cfg.channels
        x_norm = x_norm * reshape(params["revin.gamma"], (c, 1)) + reshape(params["revin.beta"], (c, 1))
    return x_norm, stats


def revin_denormalize(y_norm, stats: RevinStats, cfg: ModelConfig, params: ModelParams) -> Tensor:
    y = as_tensor(y_norm)
    if cfg.revin_affine:
        gamma = params["revin.gamma"]
        if np.any(gamma.data == 0.0):
            raise DomainError("RevIN affine scale contains zeros; cannot invert")
        c = cfg.channels
        y = (y - reshape(params["revin.beta"], (c, 1))) / reshape(gamma, (c, 1))
    return y * Tensor._wrap(stats.std[..., None]) + Tensor._wrap(stats.mean[..., None])


def patch_indices(lookback: int, patch_len: int, stride: int) -> np.ndarray:
    if patch_len > lookback:
        raise ConfigError(f"patch_len {patch_len} exceeds lookback {lookback}")
    n = (lookback - patch_len) // stride + 1
    return np.arange(n)[:, None] * stride + np.arange(patch_len)[None, :]


def patchify(x_norm, cfg: ModelConfig) -> Tensor:
    """``[batch, C, L] -> [batch*C, tokens, patch_len]``; each channel is its own sequence."""
    x = as_tensor(x_norm)
    b, c, length = x.shape
    idx = patch_indices(length, cfg.patch_len, cfg.patch_stride)
    return take(reshape(x, (b * c, length)), idx, axis=1)


def layer_norm(x: Tensor, scale_: Tensor, offset: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / sqrt(var + eps) * scale_ + offset


def _activation(h: Tensor, cfg: ModelConfig, params: ModelParams) -> Tensor:
    if cfg.ffn_activation == "prelu":
        return prelu(h, params["ffn.prelu_slopes"])
    if cfg.ffn_activation == "relu":
        return relu(h)
    return gelu(h)


def latst_forward(x, cfg: ModelConfig, params: ModelParams, training: bool = False,
                  rng: np.random.Generator | None = None, with_entropy: bool = True,
                  strict: bool = True) -> ForwardResult:
    """Forecast ``[batch, C, horizon]`` from ``x[batch, C, lookback]``."""
    xd = as_tensor(x).data
    if xd.ndim != 3 or xd.shape[1:] != (cfg.channels, cfg.lookback):
        raise DimensionError(
            f"expected input [batch, {cfg.channels}, {cfg.lookback}], got {xd.shape}")
    bsz = xd.shape[0]
    x_norm, stats = revin_normalize(xd, cfg, params)
    tokens = patchify(x_norm, cfg)
    h = tokens @ params["embed.W"] + params["embed.b"]
    if cfg.positional_embedding:
        h = h + params["embed.pos"]

    att = attention_forward(layer_norm(h, params["ln1.scale"], params["ln1.offset"]),
                            cfg.attention, params.attention, training, rng, strict)
    h = h + att.out
    z = layer_norm(h, params["ln2.scale"], params["ln2.offset"]) @ params["ffn.W1"] + params["ffn.b1"]
    h = h + _activation(z, cfg, params) @ params["ffn.W2"] + params["ffn.b2"]

    flat = reshape(h, (bsz * cfg.channels, cfg.token_count * cfg.model_dim))
    if training and cfg.head_dropout > 0.0:
        if rng is None:
            raise ContractError("training-mode dropout needs an rng")
        keep = 1.0 - cfg.head_dropout
        flat = mul(flat, Tensor._wrap((rng.random(flat.shape) < keep) / keep))
    y = flat @ params["head.W"] + params["head.b"]
    y = revin_denormalize(reshape(y, (bsz, cfg.channels, cfg.horizon)), stats, cfg, params)

    entropy = None
    if with_entropy and att.nonfinite_probs == 0:
        entropy = attention_entropy(att.probs)
    return ForwardResult(y, att.probs, entropy, att.max_abs_logit, att.nonfinite_logits, att.nonfinite_probs)
