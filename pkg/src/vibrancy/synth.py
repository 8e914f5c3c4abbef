"""Synthetic city: zoned population grid plus traffic sensors driven by it.

Each active cell follows its zone's activity profile, built from daily and
weekly harmonics with a slow seasonal swing, scaled by a per-cell level.
Stochastic parts are a per-zone daily activity factor (AR(1) across days,
interpolated hourly, log-sd ``day_jitter``) and white measurement noise
(relative sd ``noise``). With both at zero and ``seasonal_amplitude == 0`` the
grid repeats exactly every 168 hours.

Sensors read a Gaussian-weighted patch of the grid ``lag`` hours earlier, so
the grid genuinely leads traffic.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .data import DataError, GridSeries, TrafficSeries, hourly_timestamps

ZONE_NAMES = ("inactive", "commercial", "residential", "park")

# (daily harmonics: list of (period_h, amplitude, peak_hour)), weekend factor
_ZONE_PROFILES = {
    "commercial": ([(24, 0.55, 13.0), (12, 0.20, 10.0)], -0.45),
    "residential": ([(24, 0.40, 1.0), (12, 0.18, 20.0)], 0.20),
    "park": ([(24, 0.50, 15.0), (12, 0.10, 12.0)], 0.60),
}


@dataclass
class SynthConfig:
    height: int = 16
    width: int = 16
    days: int = 90
    n_sensors: int = 12
    start_time: str = "2017-01-01T00:00"
    inactive_fraction: float = 0.1
    n_zone_seeds: int = 6
    zone_levels: dict = field(default_factory=lambda: {"commercial": 2000.0, "residential": 1200.0, "park": 500.0})
    level_spread: float = 0.3
    daily_scale: float = 1.0
    weekly_scale: float = 1.0
    seasonal_amplitude: float = 0.1
    noise: float = 0.05
    day_jitter: float = 0.15
    day_jitter_rho: float = 0.6
    missing_fraction: float = 0.0
    sensor_radius: float = 1.5
    lag: int = 2
    traffic_gain: float = 1.0
    traffic_noise: float = 0.05
    traffic_base: float = 100.0

    def validate(self) -> None:
        if self.height < 4 or self.width < 4:
            raise DataError("synthetic grid must be at least 4x4")
        if self.days < 14:
            raise DataError("synthetic timeline must cover at least 14 days")
        if self.n_sensors < 1:
            raise DataError("need at least one sensor")
        if not 0.0 <= self.inactive_fraction < 1.0:
            raise DataError("inactive_fraction must be in [0, 1)")
        if self.noise < 0 or self.traffic_noise < 0 or not 0 <= self.missing_fraction < 1:
            raise DataError("noise levels must be nonnegative and missing_fraction in [0, 1)")
        if self.lag < 0:
            raise DataError("lag must be nonnegative")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)

    def to_dict(self) -> dict:
        return asdict(self)


def _zone_map(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    H, W = cfg.height, cfg.width
    n = max(cfg.n_zone_seeds, 3)
    centers = rng.uniform([0, 0], [H, W], size=(n, 2))
    labels = np.concatenate([[1, 2, 3], rng.integers(1, 4, size=n - 3)])
    rng.shuffle(labels)
    ii, jj = np.meshgrid(np.arange(H) + 0.5, np.arange(W) + 0.5, indexing="ij")
    d2 = (ii[..., None] - centers[:, 0]) ** 2 + (jj[..., None] - centers[:, 1]) ** 2
    zones = labels[np.argmin(d2, axis=-1)].astype(np.int64)
    n_inactive = int(round(cfg.inactive_fraction * H * W))
    if n_inactive:
        flat = rng.choice(H * W, size=n_inactive, replace=False)
        zones.reshape(-1)[flat] = 0
    return zones


def _profile(name: str, clock: np.ndarray, weekday0: int, cfg: SynthConfig) -> np.ndarray:
    """Deterministic relative activity (around 1) at ``clock`` hours past midnight of day 0."""
    harmonics, weekend = _ZONE_PROFILES[name]
    hod = clock % 24
    daily = np.zeros_like(clock, dtype=np.float64)
    for period, amp, peak in harmonics:
        daily += amp * np.cos(2 * np.pi * (hod - peak) / period)
    # weekend bump from two weekly harmonics, centred on Sunday 00:00
    how = (clock + 24 * weekday0) % 168 - 144.0
    weekly = weekend * 0.5 * (np.cos(2 * np.pi * how / 168) + 0.5 * np.cos(4 * np.pi * how / 168))
    seasonal = cfg.seasonal_amplitude * np.cos(2 * np.pi * clock / (365.0 * 24) - np.pi)
    return (1.0 + cfg.daily_scale * daily) * (1.0 + cfg.weekly_scale * weekly) * (1.0 + seasonal)


def _day_factors(n_zone: int, n_hours: int, offset: int, cfg: SynthConfig,
                 rng: np.random.Generator) -> np.ndarray:
    """Per-zone AR(1) daily activity multipliers, interpolated to hours."""
    n_days = (n_hours + offset) // 24 + 3
    sd = cfg.day_jitter
    eps = rng.standard_normal((n_zone, n_days))
    f = np.zeros((n_zone, n_days))
    rho = cfg.day_jitter_rho
    for k in range(n_days):
        prev = f[:, k - 1] if k else 0.0
        f[:, k] = rho * prev + np.sqrt(1 - rho ** 2) * eps[:, k]
    centres = np.arange(n_days) * 24.0 + 12.0
    hours = np.arange(n_hours) + offset
    out = np.stack([np.interp(hours, centres, f[z]) for z in range(n_zone)])
    return np.exp(sd * out - 0.5 * sd ** 2)


def synth_city(cfg: SynthConfig | None = None, seed: int = 0) -> tuple[GridSeries, TrafficSeries, dict]:
    """Generate ``(raw grid, traffic, metadata)`` deterministically from ``(cfg, seed)``."""
    cfg = cfg or SynthConfig()
    cfg.validate()
    rng = np.random.default_rng(seed)
    H, W = cfg.height, cfg.width
    T = cfg.days * 24
    lag = cfg.lag
    start = np.datetime64(cfg.start_time, "h")
    weekday0 = int((start.astype("datetime64[D]").view("int64") + 3) % 7)  # Monday=0
    hour0 = int(start.view("int64") % 24)

    zones = _zone_map(cfg, rng)
    level = np.zeros((H, W))
    for z, name in enumerate(ZONE_NAMES):
        if z == 0:
            continue
        n = int((zones == z).sum())
        level[zones == z] = cfg.zone_levels[name] * rng.lognormal(0.0, cfg.level_spread, size=n)

    # grid is generated from `lag` hours before the start so every sensor has a source
    clock = np.arange(-lag, T, dtype=np.float64) + hour0
    profiles = np.stack([np.zeros_like(clock)] + [_profile(n, clock, weekday0, cfg) for n in ZONE_NAMES[1:]])
    factors = np.ones((4, clock.size))
    if cfg.day_jitter > 0:
        factors[1:] = _day_factors(3, clock.size, lag, cfg, rng)
    zone_t = profiles * factors  # [4, T+lag]
    clean = zone_t[zones].transpose(2, 0, 1) * level[None]  # [T+lag, H, W]
    if cfg.noise > 0:
        noisy = clean + cfg.noise * level[None] * rng.standard_normal(clean.shape)
    else:
        noisy = clean.copy()
    noisy = np.maximum(noisy, 0.0)
    noisy[:, zones == 0] = 0.0

    # sensors sit on active cells; each reads a Gaussian patch of the grid
    active_idx = np.argwhere(zones > 0)
    pick = rng.choice(len(active_idx), size=min(cfg.n_sensors, len(active_idx)), replace=False)
    coords = active_idx[pick].astype(np.float64) + rng.uniform(0.25, 0.75, size=(len(pick), 2))
    order = _route_order(coords)
    coords = coords[order]
    ii, jj = np.meshgrid(np.arange(H) + 0.5, np.arange(W) + 0.5, indexing="ij")
    d2 = (ii[None] - coords[:, 0, None, None]) ** 2 + (jj[None] - coords[:, 1, None, None]) ** 2
    weights = np.exp(-d2 / (2 * cfg.sensor_radius ** 2)) * (zones > 0)[None]
    weights /= weights.sum(axis=(1, 2), keepdims=True)
    gains = cfg.traffic_gain * rng.uniform(0.5, 1.5, size=len(coords)) / 10.0
    lagged = noisy[:T]  # index t of this slice is grid time t - lag
    signal = np.einsum("thw,shw->ts", lagged, weights) * gains[None]
    base = cfg.traffic_base * rng.uniform(0.5, 1.5, size=len(coords))
    traffic = base[None] + signal
    if cfg.traffic_noise > 0:
        traffic = traffic + cfg.traffic_noise * signal.std(axis=0)[None] * rng.standard_normal(traffic.shape)
    traffic = np.maximum(traffic, 0.0)[..., None]

    grid = noisy[lag:][..., None]
    missing = np.zeros(grid.shape, dtype=bool)
    if cfg.missing_fraction > 0:
        missing = rng.random(grid.shape) < cfg.missing_fraction
        missing &= (zones > 0)[None, :, :, None]
        grid = np.where(missing, np.nan, grid)

    ts = hourly_timestamps(start, T)
    meta = {
        "zones": zones,
        "zone_names": list(ZONE_NAMES),
        "latent_rank": int(len(np.unique(zones[zones > 0]))),
        "sensor_coords": coords,
        "sensor_weights": weights,
        "sensor_gains": gains,
        "line_pairs": [(i, i + 1) for i in range(len(coords) - 1)],
        "lag": lag,
        "missing": missing,
        "seed": seed,
        "config": cfg.to_dict(),
    }
    grid_s = GridSeries(grid, ts)
    traffic_s = TrafficSeries(traffic, ts, [f"sensor_{i:03d}" for i in range(len(coords))])
    return grid_s, traffic_s, meta


def _route_order(coords: np.ndarray) -> np.ndarray:
    """Greedy nearest-neighbour route through the sensors (a synthetic 'line')."""
    n = len(coords)
    start = int(np.argmin(coords[:, 0] + coords[:, 1]))
    order = [start]
    left = set(range(n)) - {start}
    while left:
        last = coords[order[-1]]
        nxt = min(left, key=lambda k: (float(np.sum((coords[k] - last) ** 2)), k))
        order.append(nxt)
        left.remove(nxt)
    return np.asarray(order)
