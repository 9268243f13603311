"""LATST: a single-layer time-series transformer with log-sum-exp stabilized attention."""

from .attention import AttentionConfig, AttentionParams, attention_entropy, attention_forward
from .model import ModelConfig, ModelParams, init_params, latst_forward
from .numerics import gelu, logsumexp, naive_softmax, prelu, row_entropy, stable_softmax
from .tensor import Tape, Tensor, finite_diff_check

__all__ = [
    "AttentionConfig", "AttentionParams", "attention_entropy", "attention_forward",
    "ModelConfig", "ModelParams", "init_params", "latst_forward",
    "gelu", "logsumexp", "naive_softmax", "prelu", "row_entropy", "stable_softmax",
    "Tape", "Tensor", "finite_diff_check",
]

__version__ = "0.1.0"
