"""CSV ingestion, chronological splits and sliding windows."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

STD_FLOOR = 1e-8

# Hourly ETT split: 12 / 4 / 4 months of 30 days.
_ETT_HOUR = (12 * 30 * 24, 4 * 30 * 24, 4 * 30 * 24)


class DataError(ValueError):
    pass


@dataclass
class RawSeries:
    channel_names: list
    values: np.ndarray  # (T, M)
    timestamps: list | None = None

    @property
    def n_channels(self):
        return self.values.shape[1]

    def __len__(self):
        return self.values.shape[0]


def load_csv(path, dtype=np.float64) -> RawSeries:
    """Read a header + rows CSV whose first column is a timestamp or index."""
    path = Path(path)
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if len(header) < 2:
            raise DataError(f"{path}: need a timestamp column plus at least one value column")
        names = [h.strip() for h in header[1:]]
        stamps, rows = [], []
        for i, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: row {i} has {len(row)} fields, expected {len(header)}")
            vals = []
            for j, cell in enumerate(row[1:], start=1):
                try:
                    v = float(cell)
                except ValueError:
                    raise DataError(
                        f"{path}: row {i}, column {header[j]!r}: non-numeric value {cell!r}") from None
                if not math.isfinite(v):
                    raise DataError(f"{path}: row {i}, column {header[j]!r}: non-finite value {cell!r}")
                vals.append(v)
            stamps.append(row[0])
            rows.append(vals)
    if not rows:
        raise DataError(f"{path}: no data rows")
    return RawSeries(names, np.asarray(rows, dtype=dtype), stamps)


@dataclass
class SplitSpec:
    """Chronological train/val/test boundaries.

    Give either ``fractions`` (summing to 1) or explicit ``points``. Val and
    test regions get ``overlap`` extra points (normally the look-back L)
    borrowed from the region before them.
    """

    fractions: tuple | None = (0.7, 0.1, 0.2)
    points: tuple | None = None
    overlap: int = 0

    def __post_init__(self):
        if self.points is None:
            if self.fractions is None or len(self.fractions) != 3:
                raise DataError("split needs three fractions or three point counts")
            if abs(sum(self.fractions) - 1.0) > 1e-9 or min(self.fractions) < 0:
                raise DataError(f"split fractions must be non-negative and sum to 1, got {self.fractions}")
        elif len(self.points) != 3 or min(self.points) < 0:
            raise DataError(f"split points must be three non-negative counts, got {self.points}")

    @classmethod
    def ett_hour(cls, overlap=0):
        return cls(points=_ETT_HOUR, overlap=overlap)

    @classmethod
    def ett_minute(cls, overlap=0):
        return cls(points=tuple(4 * p for p in _ETT_HOUR), overlap=overlap)

    @classmethod
    def parse(cls, mode, path=None, overlap=0):
        """Build from a config string: auto, ett-hour, ett-minute, ratio[:a,b,c] or points:a,b,c."""
        mode = (mode or "auto").strip().lower()
        if mode == "auto":
            stem = Path(path).name.lower() if path else ""
            if stem.startswith("etth"):
                return cls.ett_hour(overlap)
            if stem.startswith("ettm"):
                return cls.ett_minute(overlap)
            return cls(overlap=overlap)
        if mode == "ett-hour":
            return cls.ett_hour(overlap)
        if mode == "ett-minute":
            return cls.ett_minute(overlap)
        kind, _, rest = mode.partition(":")
        try:
            nums = [float(v) for v in rest.split(",")] if rest else None
        except ValueError:
            raise DataError(f"bad split spec {mode!r}") from None
        if kind == "ratio":
            return cls(fractions=tuple(nums) if nums else (0.7, 0.1, 0.2), overlap=overlap)
        if kind == "points" and nums:
            return cls(fractions=None, points=tuple(int(v) for v in nums), overlap=overlap)
        raise DataError(f"bad split spec {mode!r}")

    def bounds(self, total):
        """[(start, end)] for train/val/test in the raw series, overlap included."""
        if self.points is not None:
            n_train, n_val, n_test = self.points
            if n_train + n_val + n_test > total:
                raise DataError(f"split needs {n_train + n_val + n_test} points, series has {total}")
        else:
            # test takes the remainder so that rounding never drops points
            n_train = int(total * self.fractions[0])
            n_test = int(total * self.fractions[2])
            n_val = total - n_train - n_test
        b1, b2 = n_train, n_train + n_val
        return [
            (0, b1),
            (max(0, b1 - self.overlap), b2),
            (max(0, b2 - self.overlap), b2 + n_test),
        ]


REGIONS = ("train", "val", "test")


def n_windows(length, seq_len, horizon):
    return max(0, length - seq_len - horizon + 1)


@dataclass
class WindowedDataset:
    """Standardized series with sliding-window access per region.

    ``regions[name]`` is a (T_region, M) array in standardized units;
    window i of a region covers rows [i, i + L) as input and
    [i + L, i + L + F) as target.
    """

    regions: dict
    mean: np.ndarray
    std: np.ndarray
    seq_len: int
    horizon: int
    bounds: list
    floored_channels: list = field(default_factory=list)
    channel_names: list = field(default_factory=list)

    @property
    def n_channels(self):
        return self.mean.shape[0]

    def n_windows(self, region):
        return n_windows(self.regions[region].shape[0], self.seq_len, self.horizon)

    def window(self, region, i):
        arr = self.regions[region]
        L, F = self.seq_len, self.horizon
        return arr[i:i + L].T, arr[i + L:i + L + F].T

    def batch(self, region, idx):
        """Stack windows ``idx`` as X (b, M, L) and Y (b, M, F)."""
        arr = self.regions[region]
        L, F = self.seq_len, self.horizon
        view = np.lib.stride_tricks.sliding_window_view(arr, L + F, axis=0)  # (W, M, L+F)
        win = view[np.asarray(idx)]
        return np.ascontiguousarray(win[..., :L]), np.ascontiguousarray(win[..., L:])

    def standardize(self, values):
        return (values - self.mean) / self.std

    def destandardize(self, values):
        return values * self.std + self.mean


def split_and_standardize(raw: RawSeries, spec: SplitSpec, seq_len, horizon, dtype=np.float32):
    """Split chronologically and z-score every region with train statistics."""
    total = len(raw)
    if total <= seq_len + horizon:
        raise DataError(f"series of length {total} is too short for L={seq_len}, F={horizon}")
    bounds = spec.bounds(total)
    regions = {}
    for name, (a, b) in zip(REGIONS, bounds):
        if n_windows(b - a, seq_len, horizon) < 1:
            raise DataError(
                f"{name} region has {b - a} points; need at least {seq_len + horizon} for one window")
        regions[name] = raw.values[a:b]
    train = regions["train"]
    mean = train.mean(axis=0)
    std = train.std(axis=0)
    floored = [int(i) for i in np.flatnonzero(std < STD_FLOOR)]
    std = np.where(std < STD_FLOOR, 1.0, std)
    for name in REGIONS:
        regions[name] = ((regions[name] - mean) / std).astype(dtype)
    return WindowedDataset(regions, mean, std, seq_len, horizon, bounds, floored,
                           list(raw.channel_names))


def iterate_batches(ds: WindowedDataset, region, batch_size, shuffle=False, drop_last=False, rng=None):
    """Yield (X, Y) batches of shape (b, M, L) and (b, M, F)."""
    if batch_size <= 0:
        raise DataError(f"batch_size must be positive, got {batch_size}")
    if region not in ds.regions:
        raise DataError(f"unknown region {region!r}")
    order = np.arange(ds.n_windows(region))
    if shuffle:
        rng = rng if rng is not None else np.random.default_rng(0)
        order = rng.permutation(order)
    stop = len(order) - len(order) % batch_size if drop_last else len(order)
    for start in range(0, stop, batch_size):
        yield ds.batch(region, order[start:start + batch_size])


def load_dataset(path, seq_len, horizon, split="auto", dtype=np.float32):
    raw = load_csv(path)
    spec = SplitSpec.parse(split, path, overlap=seq_len)
    return split_and_standardize(raw, spec, seq_len, horizon, dtype)
