import math

import numpy as np
import pytest

from latst.errors import ConfigError, DimensionError, DomainError, ShapeMismatchError
from latst.model import (ModelConfig, init_params, latst_forward, patch_indices, patchify,
                         revin_denormalize, revin_normalize)
from latst.tensor import Tensor, finite_diff_check

from oracles import latst_loops

TINY = dict(channels=1, lookback=8, horizon=2, patch_len=4, patch_stride=4, model_dim=4,
            ffn_dim=6, num_heads=1, dropout=0.0)


def tiny_cfg(**kw):
    return ModelConfig(**{**TINY, **kw})


def perturbed_params(cfg, seed):
    """Init plus noise on every tensor so no parameter sits at a special value."""
    params = init_params(cfg, seed)
    rng = np.random.default_rng(seed + 1000)
    for name, t in params.items():
        t.data = t.data + rng.normal(0, 0.3, t.shape)
    params["revin.gamma"].data = rng.uniform(0.5, 1.5, cfg.channels)
    return params


def test_revin_constant_series_is_zero():
    cfg = ModelConfig(channels=1, lookback=4, patch_len=2, patch_stride=2)
    x_norm, stats = revin_normalize(np.full((1, 1, 4), 5.0), cfg, init_params(cfg))
    np.testing.assert_array_equal(x_norm.data, 0.0)
    assert stats.std[0, 0] == math.sqrt(cfg.revin_eps)


def test_revin_two_point_series():
    cfg = ModelConfig(channels=1, lookback=2, patch_len=2, patch_stride=2, revin_eps=1e-300)
    x_norm, _ = revin_normalize(np.array([[[0.0, 2.0]]]), cfg, init_params(cfg))
    assert x_norm.data.ravel().tolist() == [-1.0, 1.0]


def test_revin_matches_two_pass_oracle():
    cfg = ModelConfig(channels=3, lookback=50, patch_len=10, patch_stride=10)
    x = np.random.default_rng(0).normal(3.0, 2.0, (4, 3, 50))
    x_norm, _ = revin_normalize(x, cfg, init_params(cfg))
    for b in range(4):
        for c in range(3):
            row = x[b, c].tolist()
            mean = sum(row) / len(row)
            var = sum((v - mean) ** 2 for v in row) / len(row)
            expected = [(v - mean) / math.sqrt(var + cfg.revin_eps) for v in row]
            np.testing.assert_allclose(x_norm.data[b, c], expected, rtol=0, atol=1e-12)
            out = x_norm.data[b, c]
            assert abs(out.mean()) < 1e-10
            assert abs(out.var() - var / (var + cfg.revin_eps)) < 1e-6


@pytest.mark.parametrize("affine", [False, True])
def test_revin_round_trip(affine):
    cfg = ModelConfig(channels=2, lookback=40, horizon=40, patch_len=8, patch_stride=8,
                      revin_affine=affine)
    params = init_params(cfg, 0)
    params["revin.gamma"].data = np.array([0.7, -1.9])
    params["revin.beta"].data = np.array([0.3, 2.0])
    x = np.random.default_rng(1).normal(10.0, 4.0, (3, 2, 40))
    x_norm, stats = revin_normalize(x, cfg, params)
    back = revin_denormalize(x_norm, stats, cfg, params).data
    np.testing.assert_allclose(back, x, rtol=0, atol=1e-10)


def test_revin_denormalize_zero_is_mean():
    cfg = ModelConfig(channels=2, lookback=12, horizon=5, patch_len=4, patch_stride=4)
    params = init_params(cfg, 0)
    x = np.random.default_rng(2).normal(size=(2, 2, 12))
    _, stats = revin_normalize(x, cfg, params)
    y = revin_denormalize(np.zeros((2, 2, 5)), stats, cfg, params).data
    np.testing.assert_allclose(y, np.repeat(x.mean(-1)[..., None], 5, -1), rtol=0, atol=1e-14)


def test_revin_denormalize_symbolic_inverse():
    cfg = ModelConfig(channels=2, lookback=12, horizon=3, patch_len=4, patch_stride=4)
    params = init_params(cfg, 0)
    params["revin.gamma"].data = np.array([1.3, 0.4])
    params["revin.beta"].data = np.array([-0.2, 0.9])
    rng = np.random.default_rng(3)
    x, y_norm = rng.normal(size=(2, 2, 12)), rng.normal(size=(2, 2, 3))
    _, stats = revin_normalize(x, cfg, params)
    got = revin_denormalize(y_norm, stats, cfg, params).data
    for b in range(2):
        for c in range(2):
            row = x[b, c].tolist()
            mean = sum(row) / 12
            std = math.sqrt(sum((v - mean) ** 2 for v in row) / 12 + cfg.revin_eps)
            g, be = params["revin.gamma"].data[c], params["revin.beta"].data[c]
            for t in range(3):
                assert abs(got[b, c, t] - ((y_norm[b, c, t] - be) / g * std + mean)) < 1e-10


def test_revin_zero_gamma_cannot_invert():
    cfg = ModelConfig(channels=1, lookback=4, horizon=2, patch_len=2, patch_stride=2)
    params = init_params(cfg)
    params["revin.gamma"].data[:] = 0.0
    _, stats = revin_normalize(np.arange(4.0).reshape(1, 1, 4), cfg, params)
    with pytest.raises(DomainError):
        revin_denormalize(np.zeros((1, 1, 2)), stats, cfg, params)


def test_patchify_examples():
    cfg = ModelConfig(channels=1, lookback=4, patch_len=2, patch_stride=2)
    out = patchify(Tensor([[[1.0, 2.0, 3.0, 4.0]]]), cfg)
    assert out.data.tolist() == [[[1.0, 2.0], [3.0, 4.0]]]

    idx = patch_indices(5, 3, 2)
    expected = [[s + j for j in range(3)] for s in range(0, 5 - 3 + 1, 2)]
    assert idx.tolist() == expected == [[0, 1, 2], [2, 3, 4]]

    whole = ModelConfig(channels=2, lookback=6, patch_len=6, patch_stride=3)
    x = np.random.default_rng(0).normal(size=(3, 2, 6))
    out = patchify(Tensor(x), whole)
    assert whole.token_count == 1
    np.testing.assert_array_equal(out.data, x.reshape(6, 1, 6))


def test_patchify_channel_major_layout():
    cfg = ModelConfig(channels=3, lookback=6, patch_len=2, patch_stride=2)
    x = np.arange(2 * 3 * 6, dtype=float).reshape(2, 3, 6)
    out = patchify(Tensor(x), cfg).data
    for b in range(2):
        for c in range(3):
            np.testing.assert_array_equal(out[b * 3 + c], x[b, c].reshape(3, 2))


def test_default_token_count():
    assert ModelConfig(channels=7).token_count == 41


def test_config_rejects_bad_values():
    with pytest.raises(ConfigError):
        ModelConfig(channels=1, lookback=8, patch_len=9)
    with pytest.raises(ConfigError):
        ModelConfig(channels=1, ffn_activation="tanh")
    with pytest.raises(ConfigError):
        ModelConfig(channels=1, model_dim=6, num_heads=4)


@pytest.mark.parametrize("kw", [
    dict(channels=1, lookback=8, horizon=2, patch_len=4, patch_stride=4, model_dim=4, num_heads=1),
    dict(channels=3, lookback=30, horizon=7, patch_len=6, patch_stride=3, model_dim=8, num_heads=2),
    dict(channels=2, lookback=16, horizon=1, patch_len=16, patch_stride=8, model_dim=6, num_heads=3,
         ffn_activation="gelu", positional_embedding=False),
    dict(channels=2, lookback=20, horizon=4, patch_len=5, patch_stride=7, model_dim=4, num_heads=4,
         ffn_activation="relu", logit_smoothing=False, revin_affine=False),
])
def test_output_shape_contract(kw):
    cfg = ModelConfig(**kw)
    x = np.random.default_rng(0).normal(size=(5, cfg.channels, cfg.lookback))
    res = latst_forward(x, cfg, init_params(cfg, 1))
    assert res.y_hat.shape == (5, cfg.channels, cfg.horizon)
    assert res.probs.shape == (5 * cfg.channels, cfg.num_heads, cfg.token_count, cfg.token_count)
    assert np.all(np.isfinite(res.y_hat.data))


def test_wrong_input_shape():
    cfg = tiny_cfg()
    with pytest.raises(DimensionError):
        latst_forward(np.zeros((2, 1, 9)), cfg, init_params(cfg))


def test_zero_head_predicts_lookback_mean():
    cfg = ModelConfig(channels=3, lookback=24, horizon=5, patch_len=6, patch_stride=6,
                      model_dim=4, num_heads=2)
    params = init_params(cfg, 4)
    params["head.W"].data[:] = 0.0
    params["head.b"].data[:] = 0.0
    x = np.random.default_rng(5).normal(2.0, 3.0, (2, 3, 24))
    y = latst_forward(x, cfg, params).y_hat.data
    np.testing.assert_allclose(y, np.repeat(x.mean(-1)[..., None], 5, -1), rtol=0, atol=1e-12)


@pytest.mark.parametrize("smoothing", [True, False])
@pytest.mark.parametrize("seed", range(5))
def test_tiny_config_matches_loop_oracle(seed, smoothing):
    cfg = tiny_cfg(logit_smoothing=smoothing)
    params = perturbed_params(cfg, seed)
    series = np.random.default_rng(seed).normal(1.0, 2.0, 8)
    p = {k: v.data.tolist() for k, v in params.items()}
    oracle = latst_loops(series.tolist(), p, dict(channel=0, patch_len=4, patch_stride=4,
                                                 model_dim=4, num_heads=1, revin_eps=cfg.revin_eps,
                                                 logit_smoothing=smoothing))
    got = latst_forward(series.reshape(1, 1, 8), cfg, params).y_hat.data.ravel()
    np.testing.assert_allclose(got, oracle, rtol=0, atol=1e-8)


def test_two_channel_two_head_matches_loop_oracle():
    cfg = ModelConfig(channels=2, lookback=10, horizon=3, patch_len=4, patch_stride=3,
                      model_dim=4, ffn_dim=5, num_heads=2, dropout=0.0)
    params = perturbed_params(cfg, 9)
    x = np.random.default_rng(9).normal(size=(1, 2, 10))
    got = latst_forward(x, cfg, params).y_hat.data[0]
    p = {k: v.data.tolist() for k, v in params.items()}
    for c in range(2):
        oracle = latst_loops(x[0, c].tolist(), p, dict(channel=c, patch_len=4, patch_stride=3,
                                                      model_dim=4, num_heads=2,
                                                      revin_eps=cfg.revin_eps, logit_smoothing=True))
        np.testing.assert_allclose(got[c], oracle, rtol=0, atol=1e-8)


def test_init_is_deterministic():
    cfg = ModelConfig(channels=2)
    a, b = init_params(cfg, 7), init_params(cfg, 7)
    assert list(a.tensors) == list(b.tensors)
    for name in a.tensors:
        assert a[name].data.tobytes() == b[name].data.tobytes()
    assert init_params(cfg, 8)["head.W"].data.tobytes() != a["head.W"].data.tobytes()


def test_init_revin_and_norm_values():
    params = init_params(ModelConfig(channels=4), 0)
    assert params["revin.gamma"].data.tolist() == [1.0] * 4
    assert params["revin.beta"].data.tolist() == [0.0] * 4
    assert np.all(params["ffn.prelu_slopes"].data == 0.25)
    params.validate(ModelConfig(channels=4))


def test_no_entropy_collapse_at_init():
    cfg = ModelConfig(channels=2, lookback=96, horizon=24)
    x = np.random.default_rng(0).normal(size=(8, 2, 96))
    ent = latst_forward(x, cfg, init_params(cfg, 0)).entropy
    assert np.all(ent.mean > 0.5) and np.all(ent.min > 0.5)


def test_channel_permutation_is_exact():
    cfg = ModelConfig(channels=4, lookback=48, horizon=12, patch_len=8, patch_stride=4, dropout=0.0)
    params = init_params(cfg, 3)
    x = np.random.default_rng(3).normal(size=(3, 4, 48))
    perm = [2, 0, 3, 1]
    y = latst_forward(x, cfg, params).y_hat.data
    y_perm = latst_forward(x[:, perm], cfg, params).y_hat.data
    assert y_perm.tobytes() == y[:, perm].tobytes()


def test_end_to_end_gradient():
    cfg = tiny_cfg(channels=2)
    params = perturbed_params(cfg, 21)
    rng = np.random.default_rng(22)
    x, target = rng.normal(size=(3, 2, 8)), Tensor(rng.normal(size=(3, 2, 2)))
    names = list(params.tensors)

    def loss(ts):
        p = type(params)(dict(zip(names, ts)))
        diff = latst_forward(x, cfg, p, with_entropy=False).y_hat - target
        return (diff * diff).mean()

    assert finite_diff_check(loss, [params[n] for n in names]) < 1e-4


def test_eval_is_deterministic():
    cfg = ModelConfig(channels=2, lookback=32, horizon=8, patch_len=8, patch_stride=4)
    params = init_params(cfg, 0)
    x = np.random.default_rng(1).normal(size=(4, 2, 32))
    a = latst_forward(x, cfg, params).y_hat.data
    b = latst_forward(x, cfg, params).y_hat.data
    assert a.tobytes() == b.tobytes()


def test_training_dropout_changes_output():
    cfg = ModelConfig(channels=2, lookback=32, horizon=8, patch_len=8, patch_stride=4,
                      head_dropout=0.5)
    params = init_params(cfg, 0)
    x = np.random.default_rng(1).normal(size=(4, 2, 32))
    a = latst_forward(x, cfg, params, training=True, rng=np.random.default_rng(0)).y_hat.data
    b = latst_forward(x, cfg, params).y_hat.data
    assert not np.array_equal(a, b)


def test_validate_names_both_shapes():
    params = init_params(ModelConfig(channels=2, horizon=96), 0)
    with pytest.raises(ShapeMismatchError, match=r"\(656, 96\).*\(656, 192\)"):
        params.validate(ModelConfig(channels=2, horizon=192))
    with pytest.raises(ShapeMismatchError):
        params.validate(ModelConfig(channels=3, horizon=96))
