"""Softmax variants, log-sum-exp, GELU, PReLU and Shannon entropy.

All kernels normalize over the last axis and are differentiable on a
:class:`~latst.tensor.Tape`.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erfc

from .errors import ContractError, DimensionError
from .tensor import Tensor, as_tensor, exp, make_result, reduce

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _check_axis(x: Tensor) -> None:
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError(f"normalization axis is empty for shape {x.shape}")


def naive_softmax(x) -> Tensor:
    """``exp(x) / sum(exp(x))`` with no shift.

    Overflows for entries above ~709.78; the resulting inf/nan values are
    returned as-is. Kept as the unstable reference path.
    """
    x = as_tensor(x)
    _check_axis(x)
    e = exp(x)
    with np.errstate(invalid="ignore", over="ignore"):
        total = reduce("sum", e, axis=-1, keepdims=True)
        return _div_quiet(e, total)


def _div_quiet(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        out = ad / bd

    def bw(g):
        with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
            return g / bd, (-(g * out) / bd).sum(axis=-1, keepdims=True)

    return make_result("div", out, (a, b), bw)


def _stable_softmax_array(xd: np.ndarray) -> np.ndarray:
    a = xd.max(axis=-1, keepdims=True)
    e = np.exp(xd - a)
    return e / e.sum(axis=-1, keepdims=True)


def logsumexp(x) -> Tensor:
    """``a + log(sum(exp(x - a)))`` with ``a`` the row maximum; reduces the last axis.

    The gradient is the stabilized softmax of ``x``.
    """
    x = as_tensor(x)
    _check_axis(x)
    xd = x.data
    a = xd.max(axis=-1, keepdims=True)
    shifted = np.exp(xd - a)
    out = (a + np.log(shifted.sum(axis=-1, keepdims=True)))[..., 0]
    probs = shifted / shifted.sum(axis=-1, keepdims=True)
    return make_result("logsumexp", out, (x,), lambda g: (g[..., None] * probs,))


def stable_softmax(x) -> Tensor:
    """Max-shifted softmax along the last axis; finite for every finite input."""
    x = as_tensor(x)
    _check_axis(x)
    s = _stable_softmax_array(x.data)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return make_result("stable_softmax", s, (x,), bw)


def softmax(x, kind: str = "stable") -> Tensor:
    if kind == "stable":
        return stable_softmax(x)
    if kind == "naive":
        return naive_softmax(x)
    raise ContractError(f"unknown softmax kind {kind!r}")


def normal_cdf(x: np.ndarray) -> np.ndarray:
    # erfc form keeps the lower tail accurate instead of cancelling to zero
    return 0.5 * erfc(-np.asarray(x, dtype=np.float64) * _INV_SQRT2)


def gelu(x) -> Tensor:
    """Exact ``x * Phi(x)`` with the standard normal CDF."""
    x = as_tensor(x)
    xd = x.data
    cdf = normal_cdf(xd)
    pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT_2PI
    return make_result("gelu", xd * cdf, (x,), lambda g: (g * (cdf + xd * pdf),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return make_result("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def prelu(x, slope) -> Tensor:
    """Identity for ``x >= 0``, ``slope * x`` otherwise.

    ``slope`` broadcasts against the trailing (channel) axes of ``x``; a zero
    input takes the positive branch.
    """
    x, slope = as_tensor(x), as_tensor(slope)
    xd, sd = x.data, slope.data
    try:
        ok = np.broadcast_shapes(sd.shape, xd.shape) == xd.shape
    except ValueError:
        ok = False
    if not ok:
        raise DimensionError(f"prelu slope shape {sd.shape} does not broadcast to {xd.shape}")
    neg = xd < 0
    out = np.where(neg, sd * xd, xd)

    def bw(g):
        gx = np.where(neg, g * sd, g)
        gs = np.where(neg, g * xd, 0.0)
        extra = gs.ndim - sd.ndim
        if extra:
            gs = gs.sum(axis=tuple(range(extra)))
        axes = tuple(i for i, d in enumerate(sd.shape) if d == 1 and gs.shape[i] != 1)
        if axes:
            gs = gs.sum(axis=axes, keepdims=True)
        return gx, gs.reshape(sd.shape)

    return make_result("prelu", out, (x, slope), bw)


def row_entropy(p, tol: float = 1e-6) -> np.ndarray:
    """Shannon entropy (nats) of each row along the last axis, with 0 ln 0 = 0.

    Diagnostic only: returns a plain array and records no gradient.
    """
    pd = as_tensor(p).data
    if pd.ndim == 0 or pd.shape[-1] == 0:
        raise DimensionError("row_entropy needs a non-empty last axis")
    sums = pd.sum(axis=-1)
    bad = ~(np.abs(sums - 1.0) <= tol) | ~np.all((pd >= 0) & (pd <= 1 + tol), axis=-1)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ContractError(f"row {idx} is not a probability vector (sum={sums[idx]!r})")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(pd > 0, pd * np.log(np.where(pd > 0, pd, 1.0)), 0.0)
    return -terms.sum(axis=-1)
