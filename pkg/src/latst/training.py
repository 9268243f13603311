"""MSE objective, Adam, the epoch loop with early stopping, and evaluation."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .data import WindowedDataset, batches
from .errors import ContractError, DimensionError, TrainingInstabilityError
from .model import ModelConfig, ModelParams, latst_forward
from .tensor import Tape, Tensor, as_tensor, mul, reduce, sub

log = logging.getLogger(__name__)


def mse_loss(y_hat, y) -> Tensor:
    """Mean of squared errors over every element (batch, channel, horizon)."""
    y_hat, y = as_tensor(y_hat), as_tensor(y)
    if y_hat.shape != y.shape:
        raise DimensionError(f"mse_loss shapes differ: {y_hat.shape} vs {y.shape}")
    diff = sub(y_hat, y)
    return reduce("mean", mul(diff, diff))


@dataclass
class OptimState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray | None], state: OptimState) -> None:
    """One bias-corrected Adam update, in place. Missing gradients count as zero."""
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise TrainingInstabilityError(
                f"non-finite gradient for parameter {name!r} at step {state.step + 1}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


@dataclass
class Schedule:
    epochs: int = 100
    patience: int = 10
    lr: float = 1e-4
    lr_decay: float = 1.0
    batch_size: int = 8
    clip_grad: float = 0.0
    max_batches_per_epoch: int = 0


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_mse: float
    entropy_mean: float
    entropy_min: float
    lr: float
    seconds: float


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_val_mse: float = math.inf
    test_mse: float = math.nan
    total_seconds: float = 0.0
    init_entropy_mean: float = math.nan


@dataclass
class EvalResult:
    mse: float
    entropy_mean: np.ndarray  # per head
    entropy_min: np.ndarray
    windows: int
    mse_raw: float | None = None


def evaluate(cfg: ModelConfig, params: ModelParams, dataset: WindowedDataset,
             batch_size: int = 64, raw_scale: bool = False) -> EvalResult:
    """Windows-weighted MSE and per-head entropy, deterministic (no dropout)."""
    if len(dataset) == 0:
        raise ContractError(f"cannot evaluate an empty {dataset.split} dataset")
    sq_sum = 0.0
    raw_sum = 0.0
    count = 0
    ent_sum = np.zeros(cfg.num_heads)
    ent_min = np.full(cfg.num_heads, np.inf)
    ent_batches = 0
    for x, y in batches(dataset, batch_size):
        res = latst_forward(x, cfg, params, training=False)
        err = res.y_hat.data - y
        sq_sum += float(np.sum(err * err))
        count += err.size
        if raw_scale:
            scaler = dataset.scaler
            raw = scaler.inverse(res.y_hat.data, channel_axis=1) - scaler.inverse(y, channel_axis=1)
            raw_sum += float(np.sum(raw * raw))
        if res.entropy is not None:
            ent_sum += res.entropy.mean * len(x)
            ent_min = np.minimum(ent_min, res.entropy.min)
            ent_batches += len(x)
    mean = ent_sum / ent_batches if ent_batches else np.full(cfg.num_heads, np.nan)
    if not ent_batches:
        ent_min = np.full(cfg.num_heads, np.nan)
    return EvalResult(sq_sum / count, mean, ent_min, len(dataset),
                      raw_sum / count if raw_scale else None)


def probe_entropy(cfg: ModelConfig, params: ModelParams, x: np.ndarray) -> tuple[float, float]:
    res = latst_forward(x, cfg, params, training=False)
    if res.entropy is None:
        return math.nan, math.nan
    return float(res.entropy.mean.mean()), float(res.entropy.min.min())


def _clip(grads: dict[str, np.ndarray | None], max_norm: float) -> None:
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values() if g is not None))
    if total > max_norm and math.isfinite(total):
        factor = max_norm / total
        for k, g in grads.items():
            if g is not None:
                grads[k] = g * factor


def train(cfg: ModelConfig, params: ModelParams, datasets: dict[str, WindowedDataset],
          schedule: Schedule, seed: int = 0) -> tuple[ModelParams, TrainReport]:
    """Adam over shuffled batches with early stopping on validation MSE.

    Returns a copy of the parameters from the best validation epoch; the
    ``params`` passed in are updated in place as training proceeds.
    """
    train_ds = datasets["train"]
    if len(train_ds) == 0:
        raise ContractError("training dataset is empty")
    val_ds = datasets.get("val")
    if val_ds is None or len(val_ds) == 0:
        val_ds = train_ds
    probe_x, _ = next(batches(val_ds, max(schedule.batch_size, 8)))

    report = TrainReport()
    report.init_entropy_mean, _ = probe_entropy(cfg, params, probe_x)
    best = params.copy()
    state = OptimState(lr=schedule.lr)
    rng = np.random.default_rng(seed)
    stale = 0
    t_start = time.perf_counter()
    for epoch in range(schedule.epochs):
        t0 = time.perf_counter()
        loss_sum, n_seen = 0.0, 0
        order_seed = int(rng.integers(2**63 - 1))
        for b_idx, (x, y) in enumerate(batches(train_ds, schedule.batch_size, True, order_seed)):
            if schedule.max_batches_per_epoch and b_idx >= schedule.max_batches_per_epoch:
                break
            for p in params.values():
                p.grad = None
            with Tape() as tape:
                res = latst_forward(x, cfg, params, training=True, rng=rng, with_entropy=False)
                loss = mse_loss(res.y_hat, y)
            lv = loss.item()
            if not math.isfinite(lv):
                raise TrainingInstabilityError(f"non-finite loss at epoch {epoch}, batch {b_idx}")
            with np.errstate(all="ignore"):
                tape.backward(loss)
            grads = {k: p.grad for k, p in params.items()}
            if schedule.clip_grad > 0:
                _clip(grads, schedule.clip_grad)
            try:
                adam_step(params.tensors, grads, state)
            except TrainingInstabilityError as e:
                raise TrainingInstabilityError(f"epoch {epoch}, batch {b_idx}: {e}") from e
            loss_sum += lv * len(x)
            n_seen += len(x)
        val = evaluate(cfg, params, val_ds).mse
        ent_mean, ent_min = probe_entropy(cfg, params, probe_x)
        rec = EpochRecord(epoch, loss_sum / max(n_seen, 1), val, ent_mean, ent_min, state.lr,
                          time.perf_counter() - t0)
        report.epochs.append(rec)
        log.info("epoch %d train %.6f val %.6f entropy %.3f", epoch, rec.train_loss, val, ent_mean)
        if val < report.best_val_mse:
            report.best_val_mse = val
            report.best_epoch = epoch
            best = params.copy()
            stale = 0
        else:
            stale += 1
            if stale >= schedule.patience:
                break
        state.lr *= schedule.lr_decay
    report.total_seconds = time.perf_counter() - t_start
    test_ds = datasets.get("test")
    if test_ds is not None and len(test_ds):
        report.test_mse = evaluate(cfg, best, test_ds).mse
    return best, report
