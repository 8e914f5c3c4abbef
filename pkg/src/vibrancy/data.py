"""Floating-population grids, traffic series, preprocessing and windowing."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

HOUR = np.timedelta64(1, "h")
WEEK_HOURS = 168


class DataError(ValueError):
    """Raised for malformed or inconsistent data inputs."""


def hourly_timestamps(start: str | np.datetime64, n: int) -> np.ndarray:
    start = np.datetime64(start, "h")
    return start + np.arange(n) * HOUR


def _check_hourly(timestamps: np.ndarray, n: int) -> np.ndarray:
    ts = np.asarray(timestamps).astype("datetime64[h]")
    if ts.shape != (n,):
        raise DataError(f"expected {n} timestamps, got shape {ts.shape}")
    if n > 1 and not np.all(np.diff(ts) == HOUR):
        raise DataError("timestamps must be spaced exactly one hour apart")
    return ts


@dataclass
class GridSeries:
    """Stack of ``[T, H, W, n_c]`` population grids with hourly timestamps."""

    values: np.ndarray
    timestamps: np.ndarray
    normalized: bool = False

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values)
        if self.values.ndim != 4:
            raise DataError(f"grid values must be [T,H,W,n_c], got shape {self.values.shape}")
        self.timestamps = _check_hourly(self.timestamps, self.values.shape[0])
        if self.normalized:
            v = self.values[np.isfinite(self.values)]
            if v.size and (v.min() < 0.0 or v.max() > 1.0):
                raise DataError("normalized grid has values outside [0, 1]")

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.values.shape[1:])  # type: ignore[return-value]


@dataclass
class TrafficSeries:
    """``[T, n_s, n_f]`` traffic observations."""

    values: np.ndarray
    timestamps: np.ndarray
    sensor_ids: list = field(default_factory=list)

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values)
        if self.values.ndim != 3 or self.values.shape[2] < 1:
            raise DataError(f"traffic values must be [T,n_s,n_f] with n_f>=1, got {self.values.shape}")
        self.timestamps = _check_hourly(self.timestamps, self.values.shape[0])
        if not self.sensor_ids:
            self.sensor_ids = [f"s{i}" for i in range(self.values.shape[1])]
        if len(self.sensor_ids) != self.values.shape[1] or len(set(self.sensor_ids)) != len(self.sensor_ids):
            raise DataError("sensor_ids must be n_s unique identifiers")

    @property
    def n_sensors(self) -> int:
        return self.values.shape[1]


@dataclass
class CellStats:
    mean: np.ndarray
    std: np.ndarray
    computed_over: tuple[int, int]


@dataclass
class ActivityMask:
    mask: np.ndarray

    def __post_init__(self) -> None:
        self.mask = np.asarray(self.mask, dtype=np.float32)
        if self.mask.ndim != 2:
            raise DataError("mask must be [H, W]")

    @property
    def n_active(self) -> int:
        return int(self.mask.sum())


@dataclass
class SplitIndex:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def __post_init__(self) -> None:
        a, b, c = (set(np.asarray(x).tolist()) for x in (self.train, self.val, self.test))
        if a & b or a & c or b & c:
            raise DataError("split partitions overlap")


@dataclass
class WindowSample:
    x_past: np.ndarray
    x_future: np.ndarray
    c_past: np.ndarray
    c_future: np.ndarray
    anchor_time: np.datetime64


def _resolve_range(index_range: tuple[int, int] | slice | None, T: int) -> tuple[int, int]:
    if index_range is None:
        start, stop = 0, T
    elif isinstance(index_range, slice):
        start, stop, _ = index_range.indices(T)
    else:
        start, stop = int(index_range[0]), int(index_range[1])
    if not (0 <= start < stop <= T):
        raise DataError(f"index range [{start}, {stop}) is empty or outside [0, {T})")
    return start, stop


# -- preprocessing -----------------------------------------------------------

def compute_cell_stats(raw: GridSeries, index_range: tuple[int, int] | slice | None = None) -> CellStats:
    """Per cell-channel population mean and std over ``index_range``.

    NaN samples are ignored; a cell that is NaN over the whole range gets NaN stats.
    """
    start, stop = _resolve_range(index_range, raw.T)
    block = np.asarray(raw.values[start:stop], dtype=np.float64)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", category=RuntimeWarning)
        mean = np.nanmean(block, axis=0)
        std = np.nanstd(block, axis=0)
    return CellStats(mean=mean, std=std, computed_over=(start, stop))


def normalize_grid(raw: GridSeries, stats: CellStats) -> GridSeries:
    """Per-cell z-score, capped at +-2 std, affinely mapped onto [0, 1].

    Cells with zero std map to 0.5.
    """
    if raw.normalized:
        raise DataError("grid is already normalized")
    if stats.mean.shape != raw.shape or stats.std.shape != raw.shape:
        raise DataError(f"stats shape {stats.mean.shape} does not match grid cells {raw.shape}")
    x = np.asarray(raw.values, dtype=np.float64)
    if np.isnan(x).any():
        raise DataError("grid contains NaN; run impute_missing before normalize_grid")
    mu, sigma = stats.mean, stats.std
    safe = np.where(sigma > 0, sigma, 1.0)
    z = np.where(sigma > 0, (x - mu) / safe, 0.0)
    c = (np.clip(z, -2.0, 2.0) + 2.0) / 4.0
    # pin the caps so boundary inputs land exactly on 0 and 1
    active = sigma > 0
    c = np.where(active & (x <= mu - 2.0 * sigma), 0.0, c)
    c = np.where(active & (x >= mu + 2.0 * sigma), 1.0, c)
    return GridSeries(c, raw.timestamps, normalized=True)


def denormalize_grid(norm: GridSeries | np.ndarray, stats: CellStats) -> np.ndarray:
    """Linear inverse of :func:`normalize_grid` (exact only where the cap did not bind)."""
    c = norm.values if isinstance(norm, GridSeries) else np.asarray(norm)
    return (4.0 * np.asarray(c, dtype=np.float64) - 2.0) * stats.std + stats.mean


def derive_mask(raw: GridSeries, index_range: tuple[int, int] | slice | None = None) -> ActivityMask:
    """Cells whose signal is identically zero over the range are inactive."""
    start, stop = _resolve_range(index_range, raw.T)
    block = np.nan_to_num(np.asarray(raw.values[start:stop], dtype=np.float64), nan=0.0)
    active = np.any(block != 0.0, axis=(0, 3))
    return ActivityMask(active.astype(np.float32))


def impute_missing(raw: GridSeries, missing: np.ndarray | None = None,
                   stats: CellStats | None = None) -> GridSeries:
    """Fill missing samples from the same cell one week earlier and later.

    Both neighbours present -> their mean; one present -> that value; neither ->
    the cell's mean from ``stats``. Neighbours that are themselves missing do not
    count. ``missing`` defaults to the NaN positions of ``raw``.
    """
    x = np.array(raw.values, dtype=np.float64)
    if missing is None:
        missing = np.isnan(x)
    missing = np.asarray(missing, dtype=bool)
    if missing.shape != x.shape:
        raise DataError(f"missing mask shape {missing.shape} != grid shape {x.shape}")
    if not missing.any():
        return GridSeries(x, raw.timestamps, normalized=raw.normalized)

    T = x.shape[0]
    obs = np.where(missing, np.nan, x)
    before = np.full_like(obs, np.nan)
    after = np.full_like(obs, np.nan)
    if T > WEEK_HOURS:
        before[WEEK_HOURS:] = obs[:-WEEK_HOURS]
        after[:-WEEK_HOURS] = obs[WEEK_HOURS:]
    has_b, has_a = ~np.isnan(before), ~np.isnan(after)
    fill = np.where(has_b & has_a, 0.5 * (before + after),
                    np.where(has_b, before, after))
    need_stats = missing & ~has_b & ~has_a
    if need_stats.any():
        if stats is None:
            raise DataError("samples with no weekly neighbour need cell stats for the fallback")
        fallback = np.broadcast_to(stats.mean, x.shape)
        if np.isnan(fallback[need_stats]).any():
            raise DataError("a fully missing cell has no training mean to fall back on")
        fill = np.where(need_stats, fallback, fill)
    out = np.where(missing, fill, x)
    return GridSeries(out, raw.timestamps, normalized=raw.normalized)


def impute_traffic(values: np.ndarray) -> np.ndarray:
    """Weekly-neighbour imputation for traffic arrays, per-sensor mean fallback."""
    v = np.asarray(values, dtype=np.float64)
    if not np.isnan(v).any():
        return v
    T, n_s, n_f = v.shape
    g = GridSeries(v.reshape(T, n_s, 1, n_f), hourly_timestamps("2000-01-01", T))
    stats = compute_cell_stats(g)
    return impute_missing(g, stats=stats).values.reshape(T, n_s, n_f)


# -- splitting and windows ---------------------------------------------------

def _split_counts(T: int, ratios: Sequence[float]) -> tuple[int, int, int]:
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError(f"ratios must be three nonnegative numbers summing to 1, got {ratios}")
    n_first = int(round(T * (ratios[0] + ratios[1])))
    n_train = int(round(T * ratios[0]))
    n_val = n_first - n_train
    n_test = T - n_first
    if min(n_train, n_val, n_test) <= 0:
        raise DataError(f"T={T} is too small for ratios {tuple(ratios)}")
    return n_train, n_val, n_test


def split_dataset(T: int, ratios: Sequence[float] = (0.4, 0.1, 0.5), seed: int = 0) -> SplitIndex:
    """Temporal holdout: the tail is test (in order); the head is shuffled into train/val."""
    n_train, n_val, n_test = _split_counts(T, ratios)
    n_first = n_train + n_val
    perm = np.random.default_rng(seed).permutation(n_first)
    return SplitIndex(train=np.sort(perm[:n_train]), val=np.sort(perm[n_train:]),
                      test=np.arange(n_first, T))


def test_start(T: int, ratios: Sequence[float] = (0.4, 0.1, 0.5)) -> int:
    """Timeline index where the held-out test range begins."""
    n_train, n_val, _ = _split_counts(T, ratios)
    return n_train + n_val


def split_windows(T: int, p: int, q: int, ratios: Sequence[float] = (0.4, 0.1, 0.5),
                  seed: int = 0) -> SplitIndex:
    """Split window anchors so every index a window touches stays on its side.

    Train/val windows lie entirely before the test range; test windows lie
    entirely inside it.
    """
    b = test_start(T, ratios)
    head = np.arange(p - 1, b - q)
    tail = np.arange(b + p - 1, T - q)
    if head.size < 2 or tail.size < 1:
        raise DataError(f"T={T} is too small for p={p}, q={q} windows")
    frac = ratios[0] / (ratios[0] + ratios[1])
    n_train = int(round(head.size * frac))
    n_train = min(max(n_train, 1), head.size - 1)
    perm = np.random.default_rng(seed).permutation(head.size)
    return SplitIndex(train=np.sort(head[perm[:n_train]]), val=np.sort(head[perm[n_train:]]), test=tail)


def window_index(anchors: np.ndarray | int, p: int, q: int) -> tuple[np.ndarray, np.ndarray]:
    """Timeline indices ``[N, p]`` (past, ending at the anchor) and ``[N, q]`` (future)."""
    a = np.atleast_1d(np.asarray(anchors, dtype=np.int64))
    past = a[:, None] + np.arange(-p + 1, 1)[None, :]
    future = a[:, None] + np.arange(1, q + 1)[None, :]
    return past, future


def window(grid: GridSeries, traffic: TrafficSeries, t: int, p: int, q: int) -> WindowSample:
    if p <= 0 or q <= 0:
        raise DataError("p and q must be positive")
    T = grid.T
    if traffic.values.shape[0] != T:
        raise DataError("grid and traffic timelines differ in length")
    if t - p + 1 < 0 or t + q >= T:
        raise DataError(f"anchor t={t} out of range for p={p}, q={q}, T={T}")
    return WindowSample(
        x_past=traffic.values[t - p + 1: t + 1],
        x_future=traffic.values[t + 1: t + q + 1],
        c_past=grid.values[t - p + 1: t + 1],
        c_future=grid.values[t + 1: t + q + 1],
        anchor_time=grid.timestamps[t],
    )
