"""Ingestion, calendar features, temporal/spatial aggregation, windowing,
and synthetic lag-coupled data generation.

All operations are pure given their inputs; a SeriesGrid is treated as
immutable after construction.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field, replace
from datetime import date, datetime, timedelta
from pathlib import Path

import numpy as np


class IngestionError(ValueError):
    """A CSV row could not be parsed."""


class SchemaError(ValueError):
    """File-level inconsistency (intervals, columns)."""


class ConfigError(ValueError):
    """Invalid operation parameters."""


class AlignmentError(ValueError):
    """Two grids disagree on interval, start, or length."""


@dataclass
class ColumnSpec:
    """How to read one modality's CSV.

    fill: 'zero' for count-like demand data, 'ffill' for level readings.
    """

    location_col: str = "location_id"
    timestamp_col: str = "timestamp"
    value_col: str = "value"
    fill: str = "zero"


@dataclass
class SeriesGrid:
    """N locations x T timestamps of scalar readings for one modality."""

    modality_name: str
    location_ids: list
    centroids: np.ndarray | None  # [N, 2] (lat, lon) degrees
    start: datetime
    interval_minutes: int
    values: np.ndarray  # [N, T]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        n = len(self.location_ids)
        if self.values.ndim != 2 or self.values.shape[0] != n:
            raise SchemaError(f"values must be [{n}, T], got {self.values.shape}")
        r = self.interval_minutes
        if r <= 0 or (60 % r != 0 and r % 60 != 0):
            raise SchemaError(f"interval {r} must divide 60 or be a multiple of 60")
        if self.centroids is not None:
            self.centroids = np.asarray(self.centroids, dtype=np.float64)
            if self.centroids.shape != (n, 2):
                raise SchemaError(f"centroids must be [{n}, 2], got "
                                  f"{self.centroids.shape}")

    @property
    def num_locations(self):
        return self.values.shape[0]

    @property
    def num_steps(self):
        return self.values.shape[1]

    def timestamps(self):
        step = timedelta(minutes=self.interval_minutes)
        return [self.start + i * step for i in range(self.num_steps)]


@dataclass(frozen=True)
class CalendarRow:
    """Calendar features of one timestep. minute_index is None when R >= 60."""

    month: int          # 1..12
    day: int            # 1..31
    hour: int           # 0..23
    minute_index: int | None  # 0 .. 60/R - 1
    weekday: int        # Monday = 0
    holiday: int        # 0/1


@dataclass
class RegionMap:
    """Partition of fine locations into K coarse regions."""

    num_regions: int
    assignment: dict  # location_id -> region index

    def __post_init__(self):
        used = set(self.assignment.values())
        if used != set(range(self.num_regions)):
            raise ConfigError(f"region map must use every index in [0, "
                              f"{self.num_regions}), got {sorted(used)}")

    def members(self, region: int):
        return [loc for loc, r in self.assignment.items() if r == region]


@dataclass
class WindowSample:
    """One training/eval sample: aligned input windows plus the target slice."""

    location_id: str
    tm_input: np.ndarray       # [H+1]
    sm_input: np.ndarray       # [H+1]
    calendar: list             # H+1 CalendarRows
    target: np.ndarray         # [L]
    resolution_minutes: int
    start: datetime
    is_coarse: bool = False


# ---------------------------------------------------------------------------
# ingestion


def load_grid_csv(path, spec: ColumnSpec | None = None,
                  modality_name: str = "") -> SeriesGrid:
    """Read a long-format CSV (location_id, timestamp, value) into a dense grid.

    Missing (location, timestamp) cells are zero-filled for demand counts or
    forward-filled for level readings, per spec.fill.
    """
    spec = spec or ColumnSpec()
    path = Path(path)
    rows = []
    with path.open(newline="") as f:
        reader = csv.DictReader(f)
        required = {spec.location_col, spec.timestamp_col, spec.value_col}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise SchemaError(f"{path}: header must contain {sorted(required)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                loc = row[spec.location_col]
                ts = datetime.fromisoformat(row[spec.timestamp_col])
                val = float(row[spec.value_col])
            except (KeyError, TypeError, ValueError) as e:
                raise IngestionError(f"{path}:{lineno}: unparsable row ({e})") from e
            rows.append((loc, ts, val))
    if not rows:
        raise SchemaError(f"{path}: no data rows")

    stamps = sorted({ts for _, ts, _ in rows})
    if len(stamps) > 1:
        deltas = {int((b - a).total_seconds()) // 60
                  for a, b in zip(stamps, stamps[1:])}
        interval = math.gcd(*deltas)
        if interval <= 0:
            raise SchemaError(f"{path}: could not infer a positive interval")
    else:
        interval = 60
    start, end = stamps[0], stamps[-1]
    t = int((end - start).total_seconds()) // 60 // interval + 1
    locs = sorted({loc for loc, _, _ in rows})
    index = {loc: i for i, loc in enumerate(locs)}

    values = np.full((len(locs), t), np.nan)
    for loc, ts, val in rows:
        offset_min = int((ts - start).total_seconds()) // 60
        if offset_min % interval != 0:
            raise SchemaError(f"{path}: timestamp {ts.isoformat()} not on the "
                              f"{interval}-minute lattice")
        values[index[loc], offset_min // interval] = val

    missing = np.isnan(values)
    if spec.fill == "zero":
        values[missing] = 0.0
    elif spec.fill == "ffill":
        for i in range(values.shape[0]):
            last = 0.0
            for j in range(t):
                if np.isnan(values[i, j]):
                    values[i, j] = last
                else:
                    last = values[i, j]
    else:
        raise ConfigError(f"unknown fill rule {spec.fill!r}")

    if (values < 0).any():
        raise SchemaError(f"{path}: negative readings present")
    return SeriesGrid(modality_name=modality_name or path.stem,
                      location_ids=locs, centroids=None, start=start,
                      interval_minutes=interval, values=values)


def load_centroids_csv(path) -> dict:
    """Sidecar CSV `location_id,lat,lon` -> {location_id: (lat, lon)}."""
    out = {}
    with Path(path).open(newline="") as f:
        reader = csv.DictReader(f)
        for lineno, row in enumerate(reader, start=2):
            try:
                out[row["location_id"]] = (float(row["lat"]), float(row["lon"]))
            except (KeyError, TypeError, ValueError) as e:
                raise IngestionError(f"{path}:{lineno}: unparsable row ({e})") from e
    return out


def attach_centroids(grid: SeriesGrid, centroids: dict) -> SeriesGrid:
    missing = [loc for loc in grid.location_ids if loc not in centroids]
    if missing:
        raise SchemaError(f"centroid file missing locations: {missing[:5]}")
    arr = np.array([centroids[loc] for loc in grid.location_ids])
    return replace(grid, centroids=arr)


def load_holidays(path) -> set:
    """One ISO date per line; blank lines and # comments ignored."""
    days = set()
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            days.add(date.fromisoformat(line))
        except ValueError as e:
            raise IngestionError(f"{path}:{lineno}: bad date ({e})") from e
    return days


# ---------------------------------------------------------------------------
# calendar


def extract_calendar_features(ts: datetime, interval_minutes: int,
                              holidays=frozenset()) -> CalendarRow:
    minute_index = None
    if interval_minutes < 60:
        if 60 % interval_minutes != 0:
            raise ConfigError(f"interval {interval_minutes} must divide 60 for "
                              "a minute index")
        minute_index = ts.minute // interval_minutes
    return CalendarRow(month=ts.month, day=ts.day, hour=ts.hour,
                       minute_index=minute_index, weekday=ts.weekday(),
                       holiday=int(ts.date() in holidays))


# ---------------------------------------------------------------------------
# aggregation / resampling


def aggregate_time(grid: SeriesGrid, target_r: int, mode: str) -> SeriesGrid:
    """Coarsen to target_r minutes; blockwise mean (levels) or sum (counts)."""
    if mode not in ("mean", "sum"):
        raise ConfigError(f"mode must be mean|sum, got {mode!r}")
    if target_r % grid.interval_minutes != 0:
        raise ConfigError(f"target interval {target_r} is not a multiple of "
                          f"{grid.interval_minutes}")
    ratio = target_r // grid.interval_minutes
    t = grid.num_steps
    keep = (t // ratio) * ratio
    if keep != t:
        warnings.warn(f"aggregate_time: dropping trailing {t - keep} step(s) "
                      f"not filling a {target_r}-minute block")
    blocks = grid.values[:, :keep].reshape(grid.num_locations, keep // ratio, ratio)
    vals = blocks.mean(axis=2) if mode == "mean" else blocks.sum(axis=2)
    return replace(grid, interval_minutes=target_r, values=vals)


def upsample_hold(grid: SeriesGrid, target_r: int) -> SeriesGrid:
    """Refine to target_r minutes by holding each value across its block."""
    if grid.interval_minutes % target_r != 0:
        raise ConfigError(f"target interval {target_r} does not divide "
                          f"{grid.interval_minutes}")
    ratio = grid.interval_minutes // target_r
    if ratio == 1:
        return replace(grid, values=grid.values.copy())
    vals = np.repeat(grid.values, ratio, axis=1)
    return replace(grid, interval_minutes=target_r, values=vals)


def kmeans_partition(centroids: np.ndarray, k: int, seed: int = 0,
                     location_ids=None, max_iter: int = 100,
                     tol: float = 1e-6) -> RegionMap:
    """Lloyd's algorithm with k-means++ seeding, deterministic under seed.

    Empty clusters are reseeded to the point farthest from its current center.
    """
    pts = np.asarray(centroids, dtype=np.float64)
    n = pts.shape[0]
    if k > n:
        raise ConfigError(f"K={k} exceeds number of locations N={n}")
    if k < 1:
        raise ConfigError(f"K must be positive, got {k}")
    rng = np.random.default_rng(seed)

    # k-means++ seeding
    centers = np.empty((k, pts.shape[1]))
    centers[0] = pts[rng.integers(n)]
    d2 = ((pts - centers[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[i] = pts[rng.integers(n)]
        else:
            centers[i] = pts[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((pts - centers[i]) ** 2).sum(axis=1))

    prev_inertia = np.inf
    labels = np.zeros(n, dtype=int)
    for _ in range(max_iter):
        dist = ((pts[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        labels = dist.argmin(axis=1)
        for i in range(k):
            mask = labels == i
            if not mask.any():
                far = dist[np.arange(n), labels].argmax()
                centers[i] = pts[far]
                labels[far] = i
            else:
                centers[i] = pts[mask].mean(axis=0)
        dist = ((pts[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        inertia = dist[np.arange(n), labels].sum()
        if prev_inertia - inertia <= tol * max(prev_inertia, 1e-30):
            break
        prev_inertia = inertia

    if location_ids is None:
        location_ids = list(range(n))
    return RegionMap(num_regions=k,
                     assignment={loc: int(lab) for loc, lab in zip(location_ids, labels)})


def default_num_regions(n: int) -> int:
    """Default coarse-region count: ceil(N / 4)."""
    return max(1, math.ceil(n / 4))


def aggregate_space(grid: SeriesGrid, regions: RegionMap, mode: str) -> SeriesGrid:
    if mode not in ("mean", "sum"):
        raise ConfigError(f"mode must be mean|sum, got {mode!r}")
    unknown = [loc for loc in regions.assignment if loc not in set(grid.location_ids)]
    if unknown:
        raise ConfigError(f"region map names unknown locations: {unknown[:5]}")
    missing = [loc for loc in grid.location_ids if loc not in regions.assignment]
    if missing:
        raise ConfigError(f"region map does not cover locations: {missing[:5]}")
    k = regions.num_regions
    vals = np.zeros((k, grid.num_steps))
    cent = np.zeros((k, 2)) if grid.centroids is not None else None
    loc_index = {loc: i for i, loc in enumerate(grid.location_ids)}
    for region in range(k):
        rows = [loc_index[loc] for loc in regions.members(region)]
        block = grid.values[rows]
        vals[region] = block.mean(axis=0) if mode == "mean" else block.sum(axis=0)
        if cent is not None:
            cent[region] = grid.centroids[rows].mean(axis=0)
    ids = [f"coarse_{i}" for i in range(k)]
    return SeriesGrid(modality_name=grid.modality_name + "_coarse",
                      location_ids=ids, centroids=cent, start=grid.start,
                      interval_minutes=grid.interval_minutes, values=vals)


# ---------------------------------------------------------------------------
# windowing


def make_windows(tm: SeriesGrid, sm: SeriesGrid, input_len: int, horizon: int,
                 holidays=frozenset(), stride: int = 1,
                 is_coarse: bool = False) -> list:
    """Sliding windows per location: input_len input steps + horizon targets."""
    if (tm.interval_minutes != sm.interval_minutes or tm.start != sm.start
            or tm.num_steps != sm.num_steps):
        raise AlignmentError(
            f"grids misaligned: tm (start={tm.start}, R={tm.interval_minutes}, "
            f"T={tm.num_steps}) vs sm (start={sm.start}, R={sm.interval_minutes}, "
            f"T={sm.num_steps})")
    t = tm.num_steps
    win = input_len + horizon
    if win > t:
        raise ConfigError(f"window of {win} steps exceeds series length {t}")
    step = timedelta(minutes=tm.interval_minutes)
    rows = [extract_calendar_features(tm.start + i * step, tm.interval_minutes,
                                      holidays) for i in range(t)]
    samples = []
    for n, loc in enumerate(tm.location_ids):
        for t0 in range(0, t - win + 1, stride):
            samples.append(WindowSample(
                location_id=loc,
                tm_input=tm.values[n, t0:t0 + input_len].copy(),
                sm_input=sm.values[n, t0:t0 + input_len].copy(),
                calendar=rows[t0:t0 + input_len],
                target=tm.values[n, t0 + input_len:t0 + win].copy(),
                resolution_minutes=tm.interval_minutes,
                start=tm.start + t0 * step,
                is_coarse=is_coarse))
    return samples


# ---------------------------------------------------------------------------
# synthetic data


def synthesize_lagged_pair(n: int, t: int, r: int, lag: int, coupling: float,
                           noise_sd: float, seed: int = 0,
                           start: datetime | None = None):
    """Generate (tm, sm) grids where tm(t) = coupling * sm(t - lag) + rest.

    sm is a daily-periodic signal plus noise; the residual part of tm is a
    periodic signal at an incommensurate frequency (so it stays decorrelated
    from sm) plus its own noise. Deterministic under seed.
    """
    if not 0.0 <= coupling <= 1.0:
        raise ConfigError(f"coupling must lie in [0, 1], got {coupling}")
    if lag >= t:
        raise ConfigError(f"lag {lag} must be smaller than T={t}")
    rng = np.random.default_rng(seed)
    steps_per_day = max(1, (24 * 60) // r)
    base = 50.0
    idx = np.arange(t + lag)

    sm_ext = np.empty((n, t + lag))
    indep = np.empty((n, t))
    for i in range(n):
        a1, a2 = rng.uniform(4.0, 8.0, size=2)
        p1, p2 = rng.uniform(0.0, 2 * np.pi, size=2)
        sm_ext[i] = (base
                     + a1 * np.sin(2 * np.pi * idx / steps_per_day + p1)
                     + a2 * np.sin(4 * np.pi * idx / steps_per_day + p2)
                     + rng.normal(0.0, noise_sd, size=t + lag))
        b1, b2 = rng.uniform(4.0, 8.0, size=2)
        q1, q2 = rng.uniform(0.0, 2 * np.pi, size=2)
        period = steps_per_day * np.sqrt(2.0)
        indep[i] = (base
                    + b1 * np.sin(2 * np.pi * idx[:t] / period + q1)
                    + b2 * np.sin(4 * np.pi * idx[:t] / period + q2)
                    + rng.normal(0.0, noise_sd, size=t))
    tm_vals = (coupling * sm_ext[:, :t] + (1.0 - coupling) * indep
               + rng.normal(0.0, noise_sd, size=(n, t)))
    sm_vals = sm_ext[:, lag:]

    start = start or datetime(2017, 1, 1)
    centroids = np.column_stack([35.0 + 0.01 * rng.random(n),
                                 139.0 + 0.01 * rng.random(n)])
    ids = [f"loc{i:03d}" for i in range(n)]
    tm = SeriesGrid("tm_synth", ids, centroids.copy(), start, r, tm_vals)
    sm = SeriesGrid("sm_synth", ids, centroids.copy(), start, r, sm_vals)
    return tm, sm


def write_grid_csv(grid: SeriesGrid, path):
    """Emit the long-format CSV the loader understands."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    stamps = grid.timestamps()
    with path.open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["location_id", "timestamp", "value"])
        for i, loc in enumerate(grid.location_ids):
            for j, ts in enumerate(stamps):
                writer.writerow([loc, ts.isoformat(),
                                 repr(float(grid.values[i, j]))])


def write_centroids_csv(grid: SeriesGrid, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["location_id", "lat", "lon"])
        for loc, (lat, lon) in zip(grid.location_ids, grid.centroids):
            writer.writerow([loc, repr(float(lat)), repr(float(lon))])
