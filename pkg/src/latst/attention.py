"""Multi-head self-attention with a log-sum-exp stabilized probability map."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, NumericalError
from .numerics import gelu, row_entropy, softmax
from .tensor import Tensor, as_tensor, matmul, mul, reshape, scale, transpose

SOFTMAX_KINDS = ("stable", "naive")


@dataclass(frozen=True)
class AttentionConfig:
    model_dim: int
    num_heads: int
    logit_smoothing: bool = True
    softmax_kind: str = "stable"
    attn_dropout: float = 0.0

    def __post_init__(self):
        if self.model_dim < 1 or self.num_heads < 1:
            raise ConfigError("model_dim and num_heads must be positive")
        if self.model_dim % self.num_heads:
            raise ConfigError(
                f"model_dim {self.model_dim} is not divisible by num_heads {self.num_heads}")
        if not 0.0 <= self.attn_dropout < 1.0:
            raise ConfigError(f"attn_dropout must lie in [0, 1), got {self.attn_dropout}")
        if self.softmax_kind not in SOFTMAX_KINDS:
            raise ConfigError(f"softmax_kind must be one of {SOFTMAX_KINDS}")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads


@dataclass
class AttentionParams:
    W_q: Tensor
    W_k: Tensor
    W_v: Tensor
    W_o: Tensor
    b_q: Tensor
    b_k: Tensor
    b_v: Tensor
    b_o: Tensor

    def tensors(self) -> dict[str, Tensor]:
        return dict(self.__dict__)


class AttentionResult(NamedTuple):
    out: Tensor
    probs: Tensor
    max_abs_logit: float
    nonfinite_logits: int
    nonfinite_probs: int


class EntropyStats(NamedTuple):
    """Per-head normalized entropy summaries (1 = uniform, 0 = one-hot)."""

    mean: np.ndarray
    min: np.ndarray
    max: np.ndarray


def init_attention_params(model_dim: int, rng: np.random.Generator) -> AttentionParams:
    bound = math.sqrt(1.0 / model_dim)

    def w():
        return Tensor(rng.uniform(-bound, bound, (model_dim, model_dim)), requires_grad=True)

    def b():
        return Tensor(rng.uniform(-bound, bound, model_dim), requires_grad=True)

    return AttentionParams(W_q=w(), W_k=w(), W_v=w(), W_o=w(), b_q=b(), b_k=b(), b_v=b(), b_o=b())


def _split_heads(t: Tensor, heads: int) -> Tensor:
    b, n, d = t.shape
    return transpose(reshape(t, (b, n, heads, d // heads)), (0, 2, 1, 3))


def attention_forward(x, cfg: AttentionConfig, params: AttentionParams, training: bool = False,
                      rng: np.random.Generator | None = None, strict: bool = True) -> AttentionResult:
    """Self-attention over ``x[batch, tokens, model_dim]``.

    Scaled logits are optionally passed through GELU before the softmax.
    Dropout (inverted scaling) touches the probabilities only in training mode,
    and the returned ``probs`` are the pre-dropout map. With ``strict`` a
    non-finite logit under the stable softmax raises :class:`NumericalError`.
    """
    x = as_tensor(x)
    if x.ndim != 3 or x.shape[2] != cfg.model_dim:
        raise DimensionError(f"attention input must be [batch, tokens, {cfg.model_dim}], got {x.shape}")
    if x.shape[1] < 1:
        raise ContractError("attention needs at least one token")
    bsz, n, _ = x.shape
    h = cfg.num_heads
    q = _split_heads(x @ params.W_q + params.b_q, h)
    k = _split_heads(x @ params.W_k + params.b_k, h)
    v = _split_heads(x @ params.W_v + params.b_v, h)

    with np.errstate(over="ignore", invalid="ignore"):
        logits = scale(matmul(q, transpose(k, None)), 1.0 / math.sqrt(cfg.head_dim))
        if cfg.logit_smoothing:
            logits = gelu(logits)
    finite = np.isfinite(logits.data)
    nonfinite_logits = int(finite.size - np.count_nonzero(finite))
    max_abs = float(np.max(np.abs(logits.data))) if logits.size else 0.0
    if strict and cfg.softmax_kind == "stable" and nonfinite_logits:
        raise NumericalError(f"{nonfinite_logits} non-finite attention logits under stable softmax")

    with np.errstate(over="ignore", invalid="ignore"):
        probs = softmax(logits, cfg.softmax_kind)
    pfin = np.isfinite(probs.data)
    nonfinite_probs = int(pfin.size - np.count_nonzero(pfin))

    weights = probs
    if training and cfg.attn_dropout > 0.0:
        if rng is None:
            raise ContractError("training-mode dropout needs an rng")
        keep = 1.0 - cfg.attn_dropout
        mask = (rng.random(probs.shape) < keep) / keep
        weights = mul(probs, Tensor._wrap(mask))

    ctx = matmul(weights, v)
    ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (bsz, n, cfg.model_dim))
    out = ctx @ params.W_o + params.b_o
    return AttentionResult(out, probs, max_abs, nonfinite_logits, nonfinite_probs)


def normalized_row_entropy(probs) -> np.ndarray:
    """Row entropy divided by ln(tokens); a single-token row counts as uniform (1.0)."""
    pd = as_tensor(probs).data
    n = pd.shape[-1]
    ent = row_entropy(pd)
    if n == 1:
        return np.ones_like(ent)
    return np.clip(ent / math.log(n), 0.0, 1.0)


def attention_entropy(probs) -> EntropyStats:
    """Summaries over ``probs[batch, heads, tokens, tokens]`` for each head."""
    pd = as_tensor(probs).data
    if pd.ndim != 4:
        raise DimensionError(f"expected [batch, heads, tokens, tokens], got {pd.shape}")
    per_row = np.moveaxis(normalized_row_entropy(pd), 1, 0).reshape(pd.shape[1], -1)
    return EntropyStats(per_row.mean(axis=1), per_row.min(axis=1), per_row.max(axis=1))
