"""Series ingestion, normalisation, windowing and a seeded synthetic generator."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import container
from .errors import ConfigError, ContractError, DataError, ShapeError

STD_FLOOR = 1e-8


@dataclass
class TimeSeries:
    values: np.ndarray  # N x d
    channels: list[str]
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ShapeError(f"series values must be N x d, got shape {self.values.shape}")
        if len(self.channels) != self.values.shape[1]:
            raise ShapeError(f"{len(self.channels)} channel names for {self.values.shape[1]} channels")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.values),):
                raise ShapeError(f"{len(self.labels)} labels for {len(self.values)} rows")

    def __len__(self) -> int:
        return len(self.values)

    @property
    def dims(self) -> int:
        return self.values.shape[1]


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, series) -> "NormStats":
        v = series.values if isinstance(series, TimeSeries) else np.asarray(series, dtype=np.float64)
        return cls(v.mean(axis=0), np.maximum(v.std(axis=0), STD_FLOOR))


def zscore(series, stats: NormStats):
    """Normalise with statistics fitted elsewhere (typically on the training split)."""
    is_ts = isinstance(series, TimeSeries)
    v = series.values if is_ts else np.asarray(series, dtype=np.float64)
    if v.shape[-1] != len(stats.mean):
        raise ShapeError(f"series has {v.shape[-1]} channels, stats were fitted on {len(stats.mean)}")
    out = (v - stats.mean) / np.maximum(stats.std, STD_FLOOR)
    return TimeSeries(out, list(series.channels), series.labels) if is_ts else out


def denormalize(values, stats: NormStats) -> np.ndarray:
    return np.asarray(values) * np.maximum(stats.std, STD_FLOOR) + stats.mean


# -- loading -----------------------------------------------------------------
def _parse_cell(cell: str, lineno: int, col: str) -> float:
    cell = cell.strip()
    if cell == "" or cell.lower() in ("nan", "na", "null"):
        return math.nan
    try:
        return float(cell)
    except ValueError:
        raise DataError(f"line {lineno}: non-numeric value {cell!r} in column {col!r}") from None


def _carry_forward(values: np.ndarray) -> np.ndarray:
    out = values.copy()
    if len(out):
        out[0] = np.where(np.isnan(out[0]), 0.0, out[0])
    for i in range(1, len(out)):
        bad = np.isnan(out[i])
        if bad.any():
            out[i, bad] = out[i - 1, bad]
    return out


def read_csv(path) -> TimeSeries:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        label_idx = header.index("label") if "label" in header else None
        channels = [h for i, h in enumerate(header) if i != label_idx]
        rows, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
            vals = [_parse_cell(c, lineno, header[i]) for i, c in enumerate(row)]
            if label_idx is not None:
                lab = vals.pop(label_idx)
                if lab not in (0.0, 1.0):
                    raise DataError(f"line {lineno}: label must be 0 or 1, got {row[label_idx]!r}")
                labels.append(int(lab))
            rows.append(vals)
    values = np.array(rows, dtype=np.float64).reshape(len(rows), len(channels))
    return TimeSeries(_carry_forward(values), channels, np.array(labels) if label_idx is not None else None)


def write_csv(path, series: TimeSeries) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(series.channels + (["label"] if series.labels is not None else []))
        for i, row in enumerate(series.values):
            cells = [repr(float(v)) for v in row]
            if series.labels is not None:
                cells.append(str(int(series.labels[i])))
            w.writerow(cells)


def write_binary(path, series: TimeSeries) -> None:
    arrays = {"values": series.values}
    if series.labels is not None:
        arrays["labels"] = series.labels.astype(np.float64)
    container.write(path, container.KIND_SERIES, {"channels": series.channels}, arrays)


def read_binary(path) -> TimeSeries:
    _, meta, arrays = container.read(path, expect_kind=container.KIND_SERIES)
    labels = arrays.get("labels")
    values = _carry_forward(arrays["values"])
    return TimeSeries(values, list(meta["channels"]), None if labels is None else labels.astype(np.int64))


def load_series(path, format: str | None = None) -> TimeSeries:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    fmt = format or ("binary" if path.suffix in (".bin", ".amad") else "csv")
    if fmt == "csv":
        return read_csv(path)
    if fmt == "binary":
        return read_binary(path)
    raise ConfigError(f"unknown series format {fmt!r}")


# -- windowing ---------------------------------------------------------------
@dataclass
class WindowBatch:
    windows: np.ndarray  # count x N x d
    starts: np.ndarray
    stats: NormStats | None = None

    def __len__(self) -> int:
        return len(self.windows)


def window_count(length: int, n: int, stride: int) -> int:
    return (length - n) // stride + 1


def sliding_windows(series, n: int, stride: int = 1, stats: NormStats | None = None) -> WindowBatch:
    v = series.values if isinstance(series, TimeSeries) else np.asarray(series, dtype=np.float64)
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    if len(v) < n:
        raise DataError(f"series of length {len(v)} is shorter than the window {n}")
    starts = np.arange(0, len(v) - n + 1, stride)
    view = np.lib.stride_tricks.sliding_window_view(v, n, axis=0)  # count x d x N
    return WindowBatch(view[starts].transpose(0, 2, 1), starts, stats)


def inference_windows(values: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Non-overlapping windows covering every row once.

    A trailing partial window is left-padded with copies of its first row.
    Returns the windows and a boolean mask marking real (non-pad) positions.
    """
    values = np.asarray(values, dtype=np.float64)
    total = len(values)
    if total == 0:
        raise DataError("cannot window an empty series")
    full = total // n
    wins = [values[i * n:(i + 1) * n] for i in range(full)]
    masks = [np.ones(n, dtype=bool)] * full
    rest = total - full * n
    if rest:
        tail = values[full * n:]
        pad = np.repeat(tail[:1], n - rest, axis=0)
        wins.append(np.concatenate([pad, tail]))
        masks.append(np.r_[np.zeros(n - rest, dtype=bool), np.ones(rest, dtype=bool)])
    return np.stack(wins), np.stack(masks)


# -- synthetic data ----------------------------------------------------------
@dataclass
class AnomalySpec:
    fraction: float = 0.01
    kinds: tuple[str, ...] = ("spike", "shift", "burst")
    noise_sigma: float = 0.05
    spike_size: float = 5.0  # in channel standard deviations
    shift_size: float = 3.0  # in channel standard deviations
    burst_factor: float = 5.0  # multiplies noise_sigma
    min_width: int = 10
    max_width: int = 30


def _base_signal(rng: np.random.Generator, length: int, dims: int, sigma: float):
    t = np.arange(length, dtype=np.float64)
    clean = np.zeros((length, dims))
    for c in range(dims):
        for _ in range(2):
            period = rng.uniform(20.0, 120.0)
            phase = rng.uniform(0.0, 2.0 * np.pi)
            amp = rng.uniform(0.5, 1.5)
            clean[:, c] += amp * np.sin(2.0 * np.pi * t / period + phase)
    return clean, rng.normal(0.0, sigma, size=(length, dims))


def _place(rng, taken: np.ndarray, width: int, margin: int = 5):
    n = len(taken)
    for _ in range(1000):
        start = int(rng.integers(margin, n - width - margin))
        lo, hi = start - margin, start + width + margin
        if not taken[lo:hi].any():
            return start
    return None


def inject_anomalies(rng, values: np.ndarray, channel_std: np.ndarray, spec: AnomalySpec):
    values = values.copy()
    n, dims = values.shape
    labels = np.zeros(n, dtype=np.int64)
    target = int(round(spec.fraction * n))
    placed = 0
    while placed < target:
        remaining = target - placed
        kind = spec.kinds[int(rng.integers(len(spec.kinds)))]
        if kind == "spike" or remaining < spec.min_width:
            kind, width = "spike", 1
        else:
            width = int(rng.integers(spec.min_width, min(spec.max_width, remaining) + 1))
        start = _place(rng, labels.astype(bool), width)
        if start is None:
            raise DataError("could not place further anomalies without overlap")
        ch = int(rng.integers(dims))
        seg = slice(start, start + width)
        if kind == "spike":
            values[seg, ch] += spec.spike_size * channel_std[ch]
        elif kind == "shift":
            values[seg, ch] += spec.shift_size * channel_std[ch]
        else:
            values[seg, ch] += rng.normal(0.0, spec.burst_factor * spec.noise_sigma, size=width)
        labels[seg] = 1
        placed += width
    return values, labels


def synth_generate(seed: int, length: int, dims: int, spec: AnomalySpec | None = None,
                   test_length: int | None = None, window_len: int | None = None):
    """Sinusoid-plus-noise train/test pair; labelled anomalies in the test half only."""
    spec = spec or AnomalySpec()
    if not 0.0 <= spec.fraction < 0.5:
        raise ContractError(f"anomaly fraction must be in [0, 0.5), got {spec.fraction}")
    test_length = length // 2 if test_length is None else test_length
    if window_len is not None and min(length, test_length) < 10 * window_len:
        raise ContractError(f"series length must be at least 10 windows ({10 * window_len})")
    rng = np.random.default_rng(seed)
    clean, noise = _base_signal(rng, length + test_length, dims, spec.noise_sigma)
    raw = clean + noise
    channel_std = clean[:length].std(axis=0)
    test_vals, labels = inject_anomalies(rng, raw[length:], channel_std, spec)
    names = [f"ch{i}" for i in range(dims)]
    return TimeSeries(raw[:length], names), TimeSeries(test_vals, names, labels)
