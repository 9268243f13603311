"""CSV loading, chronological splits, train-fitted scaling and sliding windows."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ContractError, DataLoadError

SPLITS = ("train", "val", "test")
# 12/4/4 months at hourly cadence
ETT_HOURLY = (8640, 2880, 2880)
SPLIT_PRESETS = ("generic", "ett-hourly", "ett-quarter")
STD_FLOOR = 1e-8


@dataclass
class TimeSeriesTable:
    timestamps: list[str]
    values: np.ndarray  # [T, C]
    channel_names: list[str]

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class WindowSpec:
    lookback: int = 336
    horizon: int = 96
    stride: int = 1

    def __post_init__(self):
        if self.lookback < 1 or self.horizon < 1 or self.stride < 1:
            raise ConfigError(f"window lookback/horizon/stride must be >= 1, got {self}")


@dataclass(frozen=True)
class Scaler:
    mean: np.ndarray
    std: np.ndarray

    def transform(self, values: np.ndarray) -> np.ndarray:
        return (values - self.mean) / self.std

    def inverse(self, values: np.ndarray, channel_axis: int = -1) -> np.ndarray:
        shape = [1] * values.ndim
        shape[channel_axis] = -1
        return values * self.std.reshape(shape) + self.mean.reshape(shape)


@dataclass
class WindowedDataset:
    """Windows over a scaled ``[T, C]`` array, addressed by start row.

    ``inputs``/``targets`` are read-only strided views, so large datasets
    cost no copies until a batch is gathered.
    """

    split: str
    series: np.ndarray
    starts: np.ndarray
    spec: WindowSpec
    scaler: Scaler

    def __len__(self) -> int:
        return len(self.starts)

    @property
    def inputs(self) -> np.ndarray:
        return self._view(0, self.spec.lookback)[self.starts]

    @property
    def targets(self) -> np.ndarray:
        return self._view(self.spec.lookback, self.spec.horizon)[self.starts]

    def _view(self, offset: int, length: int) -> np.ndarray:
        # [rows, C, length]
        return sliding_window_view(self.series[offset:], length, axis=0)

    def gather(self, idx) -> tuple[np.ndarray, np.ndarray]:
        s = self.starts[np.asarray(idx, dtype=np.intp)]
        x = self._view(0, self.spec.lookback)[s]
        y = self._view(self.spec.lookback, self.spec.horizon)[s]
        return np.ascontiguousarray(x), np.ascontiguousarray(y)


def load_csv(path, date_column: str = "date") -> TimeSeriesTable:
    path = Path(path)
    try:
        fh = path.open(newline="", encoding="utf-8")
    except OSError as e:
        raise DataLoadError(f"cannot open {path}: {e}") from e
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataLoadError(f"{path} is empty") from None
        header = [h.strip() for h in header]
        if len(set(header)) != len(header):
            dup = sorted({h for h in header if header.count(h) > 1})
            raise DataLoadError(f"duplicate column names {dup} in {path}")
        if date_column not in header:
            raise DataLoadError(f"date column {date_column!r} not found in {path}")
        date_idx = header.index(date_column)
        names = [h for i, h in enumerate(header) if i != date_idx]
        if not names:
            raise DataLoadError(f"{path} has no value columns")
        stamps: list[str] = []
        rows: list[list[float]] = []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataLoadError(
                    f"row {line_no} has {len(row)} cells, header has {len(header)}")
            vals = []
            for col, cell in enumerate(row):
                if col == date_idx:
                    stamps.append(cell.strip())
                    continue
                cell = cell.strip()
                if cell == "":
                    raise DataLoadError(f"missing value at row {line_no}, column {header[col]!r}")
                try:
                    v = float(cell)
                except ValueError:
                    raise DataLoadError(
                        f"non-numeric value {cell!r} at row {line_no}, column {header[col]!r}") from None
                if math.isnan(v):
                    raise DataLoadError(f"missing value (NaN) at row {line_no}, column {header[col]!r}")
                vals.append(v)
            rows.append(vals)
    values = np.array(rows, dtype=np.float64).reshape(len(rows), len(names))
    return TimeSeriesTable(stamps, values, names)


def chronological_split(rows: int, split: str | tuple[float, float, float] = "generic"
                        ) -> dict[str, tuple[int, int]]:
    """Contiguous ``[start, end)`` row ranges for train, val and test.

    Presets: ``ett-hourly`` (8640/2880/2880), ``ett-quarter`` (four times that),
    ``generic`` (0.7/0.1/0.2). Rows past the last range stay unused.
    """
    if isinstance(split, str):
        if split == "ett-hourly":
            sizes = ETT_HOURLY
        elif split == "ett-quarter":
            sizes = tuple(4 * s for s in ETT_HOURLY)
        elif split == "generic":
            return chronological_split(rows, (0.7, 0.1, 0.2))
        else:
            raise ConfigError(f"unknown split preset {split!r}; expected one of {SPLIT_PRESETS}")
        if sum(sizes) > rows:
            raise ConfigError(f"preset {split!r} needs {sum(sizes)} rows, table has {rows}")
    else:
        fr = tuple(float(f) for f in split)
        if len(fr) != 3 or any(f <= 0 for f in fr) or sum(fr) > 1 + 1e-9:
            raise ConfigError(f"split fractions must be three positive numbers summing to <= 1, got {split}")
        n_train = int(rows * fr[0])
        n_test = int(rows * fr[2])
        if abs(sum(fr) - 1.0) <= 1e-9:
            n_val = rows - n_train - n_test
        else:
            n_val = int(rows * fr[1])
        sizes = (n_train, n_val, n_test)
    a = sizes[0]
    b = a + sizes[1]
    return {"train": (0, a), "val": (a, b), "test": (b, b + sizes[2])}


def standardize(table: TimeSeriesTable, train_range: tuple[int, int]) -> tuple[np.ndarray, Scaler]:
    lo, hi = train_range
    if hi <= lo:
        raise ContractError("training range is empty")
    train = table.values[lo:hi]
    mean = train.mean(axis=0)
    std = np.sqrt(((train - mean) ** 2).mean(axis=0))
    scaler = Scaler(mean, np.maximum(std, STD_FLOOR))
    return scaler.transform(table.values), scaler


def window_starts(split_range: tuple[int, int], spec: WindowSpec) -> np.ndarray:
    """Start rows whose targets fall inside ``split_range``; lookback may reach earlier rows."""
    lo, hi = split_range
    first = max(lo - spec.lookback, 0)
    last = hi - spec.lookback - spec.horizon
    if last < first:
        return np.zeros(0, dtype=np.intp)
    return np.arange(first, last + 1, spec.stride, dtype=np.intp)


def make_windows(series: np.ndarray, ranges: dict[str, tuple[int, int]], spec: WindowSpec,
                 scaler: Scaler) -> dict[str, WindowedDataset]:
    out = {}
    for split in SPLITS:
        if split not in ranges:
            continue
        starts = window_starts(ranges[split], spec)
        if len(starts) == 0:
            if split == "train":
                raise ConfigError(
                    f"training split {ranges[split]} is too short for lookback {spec.lookback} "
                    f"+ horizon {spec.horizon}")
            warnings.warn(f"{split} split yields no windows", stacklevel=2)
        out[split] = WindowedDataset(split, series, starts, spec, scaler)
    return out


def batches(dataset: WindowedDataset, batch_size: int = 8, shuffle: bool = False,
            seed: int = 0) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    if batch_size < 1:
        raise ContractError("batch_size must be >= 1")
    order = np.arange(len(dataset))
    if shuffle:
        order = np.random.default_rng(seed).permutation(len(dataset))
    for i in range(0, len(order), batch_size):
        yield dataset.gather(order[i:i + batch_size])


def prepare(table: TimeSeriesTable, spec: WindowSpec, split="generic") -> dict[str, WindowedDataset]:
    """Split, fit the scaler on train rows and cut windows for all three splits."""
    ranges = chronological_split(table.rows, split)
    lo, hi = ranges["train"]
    if hi - lo < spec.lookback + spec.horizon:
        raise ConfigError(
            f"training split has {hi - lo} rows, fewer than lookback + horizon = "
            f"{spec.lookback + spec.horizon}")
    series, scaler = standardize(table, ranges["train"])
    return make_windows(series, ranges, spec, scaler)


def synthetic_table(rows: int = 2000, channels: int = 2, seed: int = 0) -> TimeSeriesTable:
    """Seeded sum-of-sinusoids series with mild Gaussian noise."""
    rng = np.random.default_rng(seed)
    t = np.arange(rows, dtype=np.float64)
    cols = []
    for c in range(channels):
        periods = rng.uniform(8.0, 64.0, size=3)
        amps = rng.uniform(0.5, 2.0, size=3)
        phases = rng.uniform(0.0, 2 * np.pi, size=3)
        wave = sum(a * np.sin(2 * np.pi * t / p + ph) for a, p, ph in zip(amps, periods, phases))
        cols.append(wave + 0.1 * rng.standard_normal(rows) + c)
    stamps = [f"t{i:06d}" for i in range(rows)]
    return TimeSeriesTable(stamps, np.stack(cols, axis=1), [f"ch{c}" for c in range(channels)])


def write_csv(table: TimeSeriesTable, path, date_column: str = "date") -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([date_column, *table.channel_names])
        for stamp, row in zip(table.timestamps, table.values):
            w.writerow([stamp, *(repr(float(v)) for v in row)])
