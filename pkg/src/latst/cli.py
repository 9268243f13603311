"""``latst`` command line: train, eval, ablate, diagnose.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical instability.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import checkpoint
from .attention import normalized_row_entropy
from .config import SYNTHETIC, FIELD_TYPES, RunConfig, coerce, load_file, parse_text
from .data import TimeSeriesTable, WindowedDataset, batches, load_csv, prepare
from .errors import (CheckpointFormatError, ConfigError, DataLoadError, LatstError, NumericalError,
                     ShapeMismatchError)
from .model import ModelConfig, ModelParams, init_params, latst_forward
from .training import TrainReport, evaluate, train

log = logging.getLogger("latst")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
EPOCH_COLUMNS = ("epoch", "train_loss", "val_mse", "entropy_mean", "entropy_min", "lr", "seconds")
COLLAPSE_THRESHOLD = 0.05
HIST_BINS = 20
ABLATIONS = {
    "activation": ("ffn_activation", ("prelu", "relu")),
    "gelu": ("logit_smoothing", (True, False)),
    "softmax": ("softmax_kind", ("stable", "naive")),
}


def bundled_synthetic_path() -> Path:
    return Path(str(resources.files("latst") / "resources" / "synthetic.csv"))


def load_table(cfg: RunConfig) -> TimeSeriesTable:
    path = bundled_synthetic_path() if cfg.data == SYNTHETIC else Path(cfg.data)
    return load_csv(path, cfg.date_column)


def build_datasets(cfg: RunConfig) -> tuple[TimeSeriesTable, dict[str, WindowedDataset]]:
    table = load_table(cfg)
    return table, prepare(table, cfg.window_spec(), cfg.split)


def _fmt(v: float) -> str:
    return repr(float(v))


def write_epochs(path: Path, report: TrainReport) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EPOCH_COLUMNS)
        for r in report.epochs:
            w.writerow([r.epoch, _fmt(r.train_loss), _fmt(r.val_mse), _fmt(r.entropy_mean),
                        _fmt(r.entropy_min), _fmt(r.lr), f"{r.seconds:.3f}"])


def run_training(cfg: RunConfig) -> tuple[ModelConfig, ModelParams, TrainReport, dict]:
    table, datasets = build_datasets(cfg)
    mcfg = cfg.model_config(table.channels)
    params = init_params(mcfg, cfg.seed)
    best, report = train(mcfg, params, datasets, cfg.schedule(), seed=cfg.seed)
    return mcfg, best, report, datasets


def checkpoint_text(cfg: RunConfig) -> str:
    return cfg.to_text(exclude=("out_dir",))


def cmd_train(cfg: RunConfig) -> int:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mcfg, best, report, datasets = run_training(cfg)
    checkpoint.save(out / "model.ckpt", best.tensors, checkpoint_text(cfg))
    write_epochs(out / "epochs.csv", report)
    lines = [
        f"test_mse = {_fmt(report.test_mse)}",
        f"best_epoch = {report.best_epoch}",
        f"best_val_mse = {_fmt(report.best_val_mse)}",
        f"init_entropy_mean = {_fmt(report.init_entropy_mean)}",
        f"total_seconds = {report.total_seconds:.3f}",
    ]
    if cfg.raw_scale and len(datasets.get("test", [])):
        raw = evaluate(mcfg, best, datasets["test"], raw_scale=True).mse_raw
        lines.append(f"test_mse_raw = {_fmt(raw)}")
    lines.append(f"channels = {mcfg.channels}")
    lines.append(f"token_count = {mcfg.token_count}")
    (out / "summary.txt").write_text("\n".join(lines) + "\n" + cfg.to_text())
    print(f"test_mse = {_fmt(report.test_mse)}  best_epoch = {report.best_epoch}  -> {out}")
    return EXIT_OK


def restore(ckpt_path, overrides: dict) -> tuple[RunConfig, ModelParams]:
    tensors, text = checkpoint.load(ckpt_path)
    cfg = RunConfig().replace(**parse_text(text, f"{ckpt_path} (config block)")).replace(**overrides)
    return cfg, ModelParams(tensors)


def _model_for(cfg: RunConfig, params: ModelParams, channels: int) -> ModelConfig:
    mcfg = cfg.model_config(channels)
    params.validate(mcfg)
    return mcfg


def cmd_eval(ckpt_path, overrides: dict) -> int:
    cfg, params = restore(ckpt_path, overrides)
    table, datasets = build_datasets(cfg)
    mcfg = _model_for(cfg, params, table.channels)
    res = evaluate(mcfg, params, datasets["test"], raw_scale=cfg.raw_scale)
    print(f"test_mse = {_fmt(res.mse)}")
    if res.mse_raw is not None:
        print(f"test_mse_raw = {_fmt(res.mse_raw)}")
    print(f"windows = {res.windows}")
    for h, (m, lo) in enumerate(zip(res.entropy_mean, res.entropy_min)):
        print(f"head {h}: entropy_mean = {m:.6f}  entropy_min = {lo:.6f}")
    return EXIT_OK


def cmd_ablate(cfg: RunConfig, axis: str) -> int:
    if axis not in ABLATIONS:
        raise ConfigError(f"unknown ablation axis {axis!r}; expected one of {sorted(ABLATIONS)}")
    key, variants = ABLATIONS[axis]
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for value in variants:
        vcfg = cfg.replace(**{key: value})
        label = f"{key}={'on' if value is True else 'off' if value is False else value}"
        try:
            _, _, report, _ = run_training(vcfg)
            cell = _fmt(report.test_mse)
            write_epochs(out / f"epochs_{key}_{value}.csv", report)
        except NumericalError as e:
            log.warning("variant %s diverged: %s", label, e)
            cell = "diverged"
        rows.append((label, cell))
    with (out / "ablation.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["dataset", "horizon", "variant", "test_mse"])
        for label, cell in rows:
            w.writerow([Path(cfg.data).stem, cfg.horizon, label, cell])
    width = max(len(r[0]) for r in rows)
    print(f"{'variant'.ljust(width)}  test_mse   (dataset={Path(cfg.data).stem}, horizon={cfg.horizon})")
    for label, cell in rows:
        value = cell if cell == "diverged" else f"{float(cell):.6f}"
        print(f"{label.ljust(width)}  {value}")
    return EXIT_OK


def entropy_histogram(probs: np.ndarray, bins: int = HIST_BINS) -> np.ndarray:
    """Counts of per-row normalized entropy in ``bins`` equal bins over [0, 1], one row per head."""
    per_row = normalized_row_entropy(probs)  # [batch, heads, tokens]
    heads = probs.shape[1]
    return np.stack([np.histogram(per_row[:, h].ravel(), bins=bins, range=(0.0, 1.0))[0]
                     for h in range(heads)])


def cmd_diagnose(ckpt_path, overrides: dict, max_windows: int = 256) -> int:
    cfg, params = restore(ckpt_path, overrides)
    table, datasets = build_datasets(cfg)
    mcfg = _model_for(cfg, params, table.channels)
    ds = datasets["test"] if len(datasets["test"]) else datasets["train"]
    counts = np.zeros((mcfg.num_heads, HIST_BINS), dtype=np.int64)
    ent_sum = np.zeros(mcfg.num_heads)
    ent_rows = 0
    max_logit = 0.0
    bad_logits = bad_probs = 0
    seen = 0
    for x, _ in batches(ds, 64):
        if seen >= max_windows:
            break
        res = latst_forward(x, mcfg, params, training=False, with_entropy=False, strict=False)
        seen += len(x)
        max_logit = max(max_logit, res.max_abs_logit) if not math.isnan(res.max_abs_logit) else math.nan
        bad_logits += res.nonfinite_logits
        bad_probs += res.nonfinite_probs
        p = res.probs.data
        ok = np.all(np.isfinite(p), axis=(1, 2, 3))
        if ok.any():
            counts += entropy_histogram(p[ok])
            ent = normalized_row_entropy(p[ok])
            ent_sum += ent.sum(axis=(0, 2))
            ent_rows += ent.shape[0] * ent.shape[2]
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    edges = np.linspace(0.0, 1.0, HIST_BINS + 1)
    with (out / "entropy_hist.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["head", "bin_lo", "bin_hi", "count"])
        for h in range(mcfg.num_heads):
            for b in range(HIST_BINS):
                w.writerow([h, f"{edges[b]:.2f}", f"{edges[b + 1]:.2f}", int(counts[h, b])])
    head_mean = ent_sum / ent_rows if ent_rows else np.full(mcfg.num_heads, math.nan)
    collapse = bool(ent_rows and np.any(head_mean < COLLAPSE_THRESHOLD))
    lines = [
        f"windows = {seen}",
        f"max_abs_logit = {_fmt(max_logit)}",
        f"nonfinite_logits = {bad_logits}",
        f"nonfinite_probs = {bad_probs}",
        *(f"head{h}_entropy_mean = {_fmt(m)}" for h, m in enumerate(head_mean)),
        f"collapse_threshold = {COLLAPSE_THRESHOLD}",
        f"collapse = {'true' if collapse else 'false'}",
    ]
    text = "\n".join(lines) + "\n"
    (out / "diagnose.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


def _add_overrides(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    g = p.add_argument_group("config overrides")
    for key in FIELD_TYPES:
        flags = {f"--{key}", f"--{key.replace('_', '-')}"}
        g.add_argument(*sorted(flags), dest=f"cfg_{key}", metavar=FIELD_TYPES[key].upper())


def _overrides(args) -> dict:
    values = load_file(args.config) if args.config else {}
    for key in FIELD_TYPES:
        raw = getattr(args, f"cfg_{key}")
        if raw is not None:
            values[key] = coerce(key, raw)
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="latst", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_overrides(sub.add_parser("train", help="train a model and write model.ckpt, epochs.csv, summary.txt"))
    p = sub.add_parser("eval", help="evaluate a checkpoint on its test split")
    p.add_argument("checkpoint")
    _add_overrides(p)
    p = sub.add_parser("ablate", help="train variants along one axis and compare test MSE")
    p.add_argument("--axis", required=True, choices=sorted(ABLATIONS))
    _add_overrides(p)
    p = sub.add_parser("diagnose", help="attention entropy histogram and overflow probe")
    p.add_argument("checkpoint")
    p.add_argument("--max-windows", type=int, default=256)
    _add_overrides(p)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = _overrides(args)
        if args.command == "train":
            return cmd_train(RunConfig().replace(**overrides))
        if args.command == "eval":
            return cmd_eval(args.checkpoint, overrides)
        if args.command == "ablate":
            return cmd_ablate(RunConfig().replace(**overrides), args.axis)
        return cmd_diagnose(args.checkpoint, overrides, args.max_windows)
    except NumericalError as e:
        print(f"latst: numerical instability: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataLoadError, CheckpointFormatError, OSError) as e:
        print(f"latst: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, ShapeMismatchError, LatstError) as e:
        print(f"latst: error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
