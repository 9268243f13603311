import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from latst.errors import ContractError, DimensionError
from latst.numerics import gelu, logsumexp, naive_softmax, prelu, row_entropy, stable_softmax
from latst.tensor import Tape, Tensor, finite_diff_check

# frozen from mpmath at 40 digits
E_OVER_1_PLUS_E = 0.7310585786300048792511592418218362743651
ONE_OVER_1_PLUS_E = 0.2689414213699951207488407581781637256349
GELU_1 = 0.8413447460685429485852325456320379224779
GELU_MINUS_10 = -7.619853024160526065973343251599308363504e-23
LN2 = 0.6931471805599453094172321214581765680755
# largest k with exp(k) finite in float64: ln(2**1024)
EXP_OVERFLOW = 709.7827128933839968432456923731728057093

logit_rows = arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 12)),
                    elements=st.floats(-50, 50, allow_nan=False))


def test_naive_softmax_symmetric():
    assert naive_softmax(Tensor([0.0, 0.0])).data.tolist() == [0.5, 0.5]


def test_naive_softmax_overflows():
    assert math.isfinite(math.exp(709.78)) and 710.0 > EXP_OVERFLOW
    out = naive_softmax(Tensor([710.0, 0.0])).data
    assert not np.all(np.isfinite(out))


def test_naive_softmax_known_value():
    out = naive_softmax(Tensor([1.0, 0.0])).data
    np.testing.assert_allclose(out, [E_OVER_1_PLUS_E, ONE_OVER_1_PLUS_E], rtol=0, atol=1e-15)


def test_logsumexp_examples():
    x = 3.25
    assert logsumexp(Tensor([x])).item() == x
    assert abs(logsumexp(Tensor([0.0, 0.0])).item() - LN2) < 1e-15
    out = logsumexp(Tensor([1000.0, 1000.0])).item()
    assert math.isfinite(out) and abs(out - (1000 + LN2)) < 1e-12


def test_logsumexp_empty_axis():
    with pytest.raises(DimensionError):
        logsumexp(Tensor(np.zeros((2, 0))))


def test_stable_softmax_overflow_case():
    out = stable_softmax(Tensor([710.0, 0.0])).data
    assert np.all(np.isfinite(out))
    assert abs(out[0] - 1.0) < 1e-300 and abs(out[1]) < 1e-300


@pytest.mark.parametrize("c", [-700.0, -3.0, 0.0, 12.5, 700.0])
def test_stable_softmax_constant_row(c):
    np.testing.assert_allclose(stable_softmax(Tensor([c] * 4)).data, [0.25] * 4, rtol=0, atol=1e-15)


def test_stable_matches_naive_in_safe_range():
    x = np.random.default_rng(0).uniform(-50, 50, (200, 9))
    np.testing.assert_allclose(stable_softmax(Tensor(x)).data, naive_softmax(Tensor(x)).data,
                               rtol=0, atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(logit_rows, st.floats(-700, 700))
def test_shift_invariance(x, c):
    np.testing.assert_allclose(stable_softmax(Tensor(x + c)).data, stable_softmax(Tensor(x)).data,
                               rtol=0, atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 10)),
              elements=st.floats(-1e8, 1e8, allow_nan=False)))
def test_overflow_immunity(x):
    s = stable_softmax(Tensor(x)).data
    assert np.all(np.isfinite(s)) and np.all((s >= 0) & (s <= 1))
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, rtol=0, atol=1e-12)
    assert np.all(np.isfinite(logsumexp(Tensor(x)).data))


@settings(max_examples=200, deadline=None)
@given(logit_rows)
def test_logsumexp_gradient_is_softmax(x):
    t = Tensor(x, requires_grad=True)
    with Tape() as tape:
        loss = logsumexp(t).sum()
    tape.backward(loss)
    np.testing.assert_allclose(t.grad, stable_softmax(Tensor(x)).data, rtol=0, atol=1e-10)


def test_gelu_values():
    assert gelu(Tensor([0.0])).item() == 0.0
    assert abs(gelu(Tensor([1.0])).item() - GELU_1) < 1e-15
    g10 = gelu(Tensor([-10.0])).item()
    assert abs(g10) < 1e-20
    assert g10 == pytest.approx(GELU_MINUS_10, rel=1e-12)
    assert abs(gelu(Tensor([50.0])).item() - 50.0) < 1e-12


def test_prelu_values():
    a = Tensor([0.25])
    assert prelu(Tensor([3.0]), a).item() == 3.0
    assert prelu(Tensor([-2.0]), a).item() == -0.5
    x = np.random.default_rng(1).normal(size=20)
    np.testing.assert_array_equal(prelu(Tensor(x), Tensor([1.0])).data, x)


def test_prelu_zero_takes_positive_branch():
    x = Tensor([0.0], requires_grad=True)
    s = Tensor([0.25], requires_grad=True)
    with Tape() as tape:
        loss = prelu(x, s).sum()
    tape.backward(loss)
    assert x.grad.tolist() == [1.0] and s.grad.tolist() == [0.0]


def test_prelu_slope_gradient_formula():
    x = np.array([[-1.0, 2.0, -3.0], [0.5, -0.5, -2.0]])
    g = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    xt, s = Tensor(x), Tensor([0.1, 0.2, 0.3], requires_grad=True)
    with Tape() as tape:
        loss = (prelu(xt, s) * Tensor(g)).sum()
    tape.backward(loss)
    expected = [sum(x[r, c] * g[r, c] for r in range(2) if x[r, c] < 0) for c in range(3)]
    np.testing.assert_allclose(s.grad, expected)


def test_row_entropy_values():
    assert abs(row_entropy(Tensor([0.25] * 4))[()] - math.log(4)) < 1e-15
    assert row_entropy(Tensor([0.0, 1.0, 0.0]))[()] == 0.0
    p = [0.5, 0.25, 0.25]
    oracle = -sum(q * math.log(q) for q in p)
    assert abs(row_entropy(Tensor(p))[()] - oracle) < 1e-15
    assert abs(oracle - 1.5 * LN2) < 1e-15


def test_row_entropy_rejects_non_distribution():
    with pytest.raises(ContractError):
        row_entropy(Tensor([0.5, 0.6]))


@pytest.mark.parametrize("seed", range(10))
def test_gradient_checks(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.uniform(-2, 2, (3, 6)))
    w = Tensor(rng.normal(size=(3, 6)))
    assert finite_diff_check(lambda t: logsumexp(t).sum(), x) < 1e-6
    assert finite_diff_check(lambda t: (stable_softmax(t) * w).sum(), x) < 1e-6
    assert finite_diff_check(lambda t: gelu(t).sum(), x) < 1e-6
    slope = Tensor(rng.uniform(0.05, 0.5, 6))
    assert finite_diff_check(lambda ts: (prelu(ts[0], ts[1]) * w).sum(), [x, slope]) < 1e-6


def test_naive_softmax_gradient_in_safe_range():
    rng = np.random.default_rng(3)
    x, w = Tensor(rng.uniform(-3, 3, (2, 5))), Tensor(rng.normal(size=(2, 5)))
    assert finite_diff_check(lambda t: (naive_softmax(t) * w).sum(), x) < 1e-6


@pytest.mark.parametrize("seed", range(20))
def test_logsumexp_gradient_wide_range_within_roundoff(seed):
    # over [-5, 5] some softmax weights are ~1e-5, so the relative error of a
    # central difference is dominated by ulp(f) / h; check against that bound
    x = np.random.default_rng(seed).uniform(-5, 5, 6)
    t = Tensor(x, requires_grad=True)
    with Tape() as tape:
        loss = logsumexp(t)
    tape.backward(loss)
    h = 1e-6
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        fp, fm = logsumexp(Tensor(xp)).item(), logsumexp(Tensor(xm)).item()
        num = (fp - fm) / (xp[i] - xm[i])
        bound = 2 * np.spacing(abs(loss.item())) / (2 * h) + 1e-6 * abs(num)
        assert abs(t.grad[i] - num) <= bound
