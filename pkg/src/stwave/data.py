"""Speed series IO, windowing, splitting, scaling and the synthetic generator."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path

import numpy as np

from stwave import rng as rngmod
from stwave.errors import DegenerateDataError, ParseError, ShapeError
from stwave.graph import SensorGraph, build_adjacency, transition_matrices

STEP = np.timedelta64(5, "m")
DAY_SECONDS = 86400
SPLIT_FRACTIONS = (7, 1)  # tenths for train and val; test gets the remainder


@dataclass
class SpeedSeries:
    """Speeds (T, N) in mph on a fixed 5-minute grid; 0 means no vehicles passed."""

    timestamps: np.ndarray
    speeds: np.ndarray
    sensor_ids: list[str]

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype="datetime64[s]")
        self.speeds = np.asarray(self.speeds, dtype=np.float64)
        if self.speeds.ndim != 2:
            raise ShapeError(f"speeds must be (T, N), got {self.speeds.shape}")
        if len(self.timestamps) != self.speeds.shape[0]:
            raise ShapeError(f"{len(self.timestamps)} timestamps for {self.speeds.shape[0]} rows")
        if len(self.sensor_ids) != self.speeds.shape[1]:
            raise ShapeError(f"{len(self.sensor_ids)} sensor ids for {self.speeds.shape[1]} columns")
        if not np.isfinite(self.speeds).all():
            raise DegenerateDataError("speeds contain NaN or inf")
        if (self.speeds < 0).any():
            raise DegenerateDataError("speeds must be non-negative")
        if len(self.timestamps) > 1 and (np.diff(self.timestamps) != STEP).any():
            raise DegenerateDataError("timestamps must advance in exact 5-minute steps")

    @property
    def n_steps(self) -> int:
        return self.speeds.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.speeds.shape[1]

    @property
    def time_of_day(self) -> np.ndarray:
        """Fraction of the day elapsed at each timestamp, in [0, 1)."""
        secs = (self.timestamps - self.timestamps.astype("datetime64[D]")).astype(np.int64)
        return secs / DAY_SECONDS


def _parse_time(text: str, path, lineno) -> np.datetime64:
    try:
        return np.datetime64(datetime.fromisoformat(text.strip()).replace(tzinfo=None), "s")
    except ValueError:
        raise ParseError(f"bad ISO-8601 timestamp {text.strip()!r}", path, lineno) from None


def load_speed_csv(path) -> SpeedSeries:
    """Read ``timestamp,<sensor ids...>`` CSV into a validated series."""
    path = Path(path)
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise ParseError(f"cannot read speed file: {exc}", path) from exc
    if not rows:
        raise ParseError("empty speed file", path)
    header = [h.strip() for h in rows[0]]
    if len(header) < 2:
        raise ParseError("header must name a timestamp column and at least one sensor", path, 1)
    sensors = header[1:]
    n = len(sensors)
    stamps, values = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != n + 1:
            raise ParseError(f"expected {n + 1} fields, found {len(row)}", path, lineno)
        ts = _parse_time(row[0], path, lineno)
        try:
            vals = [float(c) for c in row[1:]]
        except ValueError as exc:
            raise ParseError(f"non-numeric speed ({exc})", path, lineno) from None
        if any(math.isnan(v) or math.isinf(v) for v in vals):
            raise ParseError("speed is NaN or inf", path, lineno)
        neg = [sensors[j] for j, v in enumerate(vals) if v < 0]
        if neg:
            raise ParseError(f"negative speed for sensor {neg[0]}", path, lineno)
        if stamps and ts <= stamps[-1][0]:
            what = "duplicated" if ts == stamps[-1][0] else "out-of-order"
            raise ParseError(f"{what} timestamp {ts} (previous row line {stamps[-1][1]})", path, lineno)
        stamps.append((ts, lineno))
        values.append(vals)
    if not stamps:
        raise ParseError("no data rows", path)
    times = np.array([t for t, _ in stamps], dtype="datetime64[s]")
    gaps = np.flatnonzero(np.diff(times) != STEP)
    if gaps.size:
        missing = []
        for g in gaps:
            t = times[g] + STEP
            while t < times[g + 1] and len(missing) < 10:
                missing.append(str(t))
                t = t + STEP
            if (times[g + 1] - times[g]) % STEP:
                raise ParseError(f"timestamp {times[g + 1]} is off the 5-minute grid", path, stamps[g + 1][1])
        raise ParseError("missing 5-minute steps: " + ", ".join(missing), path, stamps[gaps[0] + 1][1])
    return SpeedSeries(times, np.array(values, dtype=np.float64), sensors)


def write_speed_csv(path, series: SpeedSeries):
    """Write a series; ``repr`` floats make write-then-read bit-exact."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", *series.sensor_ids])
        for ts, row in zip(series.timestamps, series.speeds):
            w.writerow([str(ts), *(repr(float(v)) for v in row)])


def window_starts(n_steps: int, t_in: int = 12, t_out: int = 12) -> np.ndarray:
    if t_in < 1 or t_out < 1:
        raise ShapeError("window lengths must be positive")
    need = t_in + t_out
    if n_steps < need:
        raise ShapeError(f"series has {n_steps} steps; windows need at least {need}")
    return np.arange(n_steps - need + 1)


def _gather(values: np.ndarray, starts: np.ndarray, offset: int, length: int) -> np.ndarray:
    # values (T, N, ...) -> (len(starts), N, length, ...)
    idx = starts[:, None] + offset + np.arange(length)[None, :]
    out = values[idx]                                   # (B, length, N, ...)
    return np.swapaxes(out, 1, 2)


def make_windows(series: SpeedSeries, t_in: int = 12, t_out: int = 12):
    """Stride-1 windows: raw inputs (B, N, t_in), targets Y and mask M (B, N, t_out)."""
    starts = window_starts(series.n_steps, t_in, t_out)
    X_raw = _gather(series.speeds, starts, 0, t_in)
    Y = _gather(series.speeds, starts, t_in, t_out)
    return X_raw, Y, (Y != 0).astype(np.float64)


def split_sizes(n_windows: int) -> tuple[int, int, int]:
    if n_windows < 3:
        raise DegenerateDataError(f"need at least 3 windows to split, got {n_windows}")
    n_train = n_windows * SPLIT_FRACTIONS[0] // 10
    n_val = n_windows * SPLIT_FRACTIONS[1] // 10
    return n_train, n_val, n_windows - n_train - n_val


def chrono_split(windows):
    """Split an ordered sequence of windows into (train, val, test) by index."""
    a, b, _ = split_sizes(len(windows))
    return windows[:a], windows[a:a + b], windows[a + b:]


@dataclass(frozen=True)
class Scaler:
    mean: float
    std: float

    @classmethod
    def fit(cls, speeds: np.ndarray) -> "Scaler":
        """Statistics over the nonzero entries only."""
        vals = np.asarray(speeds, dtype=np.float64)
        vals = vals[vals != 0]
        if vals.size == 0:
            raise DegenerateDataError("training speeds are all zero")
        std = float(vals.std())
        if not std > 0:
            raise DegenerateDataError(f"training speeds are constant ({float(vals[0])}); std = 0")
        return cls(float(vals.mean()), std)

    def transform(self, x):
        return (x - self.mean) / self.std

    def inverse(self, z):
        return z * self.std + self.mean


def zero_replace(x_raw: np.ndarray, train_mean: float) -> np.ndarray:
    """Substitute ``train_mean`` for exact zeros (input side only)."""
    x = np.array(x_raw, dtype=np.float64, copy=True)
    x[x == 0] = train_mean
    return x


class WindowedDataset:
    """Lazily gathered windows over shared feature arrays.

    ``features`` is (T, N, 2): scaled speed and time of day.  ``raw`` keeps
    the untouched speeds for targets and masks.  Batches are built on demand
    so full-size corpora never materialize every window.
    """

    def __init__(self, features, raw, starts, t_in, t_out, scaler, history=None):
        self.features = features
        self.raw = raw
        self.starts = np.asarray(starts, dtype=np.int64)
        self.t_in = t_in
        self.t_out = t_out
        self.scaler = scaler
        self.history = t_in if history is None else history
        if not 1 <= self.history <= t_in:
            raise ShapeError(f"history must lie in 1..{t_in}, got {self.history}")

    def __len__(self):
        return len(self.starts)

    @property
    def n_nodes(self) -> int:
        return self.raw.shape[1]

    def subset(self, index) -> "WindowedDataset":
        return WindowedDataset(self.features, self.raw, self.starts[index], self.t_in, self.t_out,
                               self.scaler, self.history)

    def with_history(self, length: int) -> "WindowedDataset":
        """Same windows with inputs cut to the newest ``length`` steps."""
        return WindowedDataset(self.features, self.raw, self.starts, self.t_in, self.t_out, self.scaler, length)

    def batch(self, index=None):
        """(X (b, N, history, 2), Y (b, N, t_out), M (b, N, t_out))."""
        starts = self.starts if index is None else self.starts[index]
        skip = self.t_in - self.history
        X = _gather(self.features, starts, skip, self.history)
        Y = _gather(self.raw, starts, self.t_in, self.t_out)
        return X, Y, (Y != 0).astype(Y.dtype)

    @property
    def X(self):
        return self.batch()[0]

    @property
    def Y(self):
        return self.batch()[1]

    @property
    def M(self):
        return self.batch()[2]

    def last_observed(self, index=None) -> np.ndarray:
        """Most recent nonzero input reading per window and node (train mean if none)."""
        starts = self.starts if index is None else self.starts[index]
        window = _gather(self.raw, starts, 0, self.t_in)            # (b, N, t_in)
        nz = window != 0
        last = self.t_in - 1 - np.argmax(nz[..., ::-1], axis=-1)
        out = np.take_along_axis(window, last[..., None], axis=-1)[..., 0]
        return np.where(nz.any(axis=-1), out, self.scaler.mean)

    def batches(self, batch_size: int, rng: np.random.Generator | None = None):
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for lo in range(0, len(order), batch_size):
            yield self.batch(order[lo:lo + batch_size])


@dataclass
class DatasetSplits:
    train: WindowedDataset
    val: WindowedDataset
    test: WindowedDataset
    scaler: Scaler

    def split(self, name: str) -> WindowedDataset:
        if name not in ("train", "val", "test"):
            raise ValueError(f"unknown split {name!r}; expected train, val or test")
        return getattr(self, name)

    def with_history(self, length: int) -> "DatasetSplits":
        return DatasetSplits(self.train.with_history(length), self.val.with_history(length),
                             self.test.with_history(length), self.scaler)


def prepare_dataset(series: SpeedSeries, t_in: int = 12, t_out: int = 12,
                    zero_replacement: bool = True, dtype=np.float32) -> DatasetSplits:
    """Window, split chronologically, fit the scaler on train inputs and build features.

    Scaler statistics come from the nonzero speeds inside the train windows'
    inputs, so they are the same whether or not zeros are replaced.  With
    replacement off, zeros pass through the z-score like any other value.
    """
    starts = window_starts(series.n_steps, t_in, t_out)
    train, val, test = chrono_split(starts)
    scaler = Scaler.fit(series.speeds[:train[-1] + t_in])
    speed = zero_replace(series.speeds, scaler.mean) if zero_replacement else series.speeds
    tod = np.broadcast_to(series.time_of_day[:, None], speed.shape)
    features = np.stack([scaler.transform(speed), tod], axis=-1).astype(dtype)
    raw = series.speeds
    mk = lambda s: WindowedDataset(features, raw, s, t_in, t_out, scaler)  # noqa: E731
    return DatasetSplits(mk(train), mk(val), mk(test), scaler)


# synthetic traffic ---------------------------------------------------------

RUSH_HOURS = ((8.0, 1.5, 22.0), (17.5, 2.0, 18.0))  # (center hour, half width h, depth mph)


def _rush_profile(hours: np.ndarray, depth_scale: np.ndarray) -> np.ndarray:
    dip = np.zeros(hours.shape)
    for center, half, depth in RUSH_HOURS:
        u = (hours - center) / half
        inside = np.abs(u) < 1
        dip += np.where(inside, depth * np.cos(0.5 * np.pi * u) ** 2, 0.0)
    return dip * depth_scale


def synthetic_graph(n_nodes: int, seed: int, extent_m: float = 12000.0) -> SensorGraph:
    """Random geometric directed road graph; far pairs are unreachable (inf)."""
    g = rngmod.stream(seed, "synthetic", "graph")
    pos = g.uniform(0, extent_m, size=(n_nodes, 2))
    euclid = np.sqrt(((pos[:, None, :] - pos[None, :, :]) ** 2).sum(-1))
    detour = 1.0 + 0.5 * g.random((n_nodes, n_nodes))  # directed: i->j and j->i differ
    D = euclid * detour
    radius = extent_m * 0.55
    D[euclid > radius] = np.inf
    np.fill_diagonal(D, 0.0)
    return SensorGraph(D)


def generate_synthetic(n_nodes: int, n_days: int, seed: int, zero_rate: float = 0.05,
                       start: str = "2012-03-01T00:00:00") -> tuple[SensorGraph, SpeedSeries]:
    """Seeded desk-scale stand-in for a loop-detector network.

    Each node follows a ~65 mph free-flow level with morning and evening
    raised-cosine rush-hour dips (node-specific phase and depth).  A
    congestion anomaly diffuses downstream along the graph each step and
    decays, measurement noise is added, and a ``zero_rate`` fraction of
    readings is zeroed independently.
    """
    if n_nodes < 2:
        raise DegenerateDataError("synthetic network needs at least 2 nodes")
    if n_days < 1:
        raise DegenerateDataError("n_days must be at least 1")
    if not 0 <= zero_rate < 1:
        raise DegenerateDataError(f"zero_rate must lie in [0, 1), got {zero_rate}")
    graph = synthetic_graph(n_nodes, seed)
    P, _ = transition_matrices(build_adjacency(graph))
    g = rngmod.stream(seed, "synthetic", "series")
    steps_per_day = DAY_SECONDS // 300
    T = n_days * steps_per_day
    hours = (np.arange(T) % steps_per_day) * (24.0 / steps_per_day)
    base = 65.0 + g.normal(0.0, 2.0, n_nodes)
    phase = g.normal(0.0, 0.3, n_nodes)                # hours
    depth = g.uniform(0.7, 1.3, n_nodes)
    profile = base[None, :] - _rush_profile(hours[:, None] - phase[None, :], depth[None, :])

    rho, mix = 0.92, 0.5
    shocks = g.normal(0.0, 0.7, (T, n_nodes))
    incidents = (g.random((T, n_nodes)) < 0.002) * g.uniform(-25.0, -10.0, (T, n_nodes))
    anomaly = np.zeros((T, n_nodes))
    a = np.zeros(n_nodes)
    for t in range(T):
        a = rho * ((1 - mix) * a + mix * (P @ a)) + shocks[t] + incidents[t]
        anomaly[t] = a
    noise = g.normal(0.0, 1.0, (T, n_nodes))
    speeds = np.clip(profile + anomaly + noise, 3.0, 85.0)
    if zero_rate > 0:
        speeds[g.random((T, n_nodes)) < zero_rate] = 0.0
    t0 = np.datetime64(start, "s")
    stamps = t0 + np.arange(T) * STEP
    ids = [f"s{i:03d}" for i in range(n_nodes)]
    return graph, SpeedSeries(stamps, speeds, ids)
