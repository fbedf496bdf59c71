"""Few-shot regression tasks: GP draws, Smart Meter clips and OOD variants."""
from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Iterable

import numpy as np

from . import rng as _rng
from .kernels import DegenerateInputError, KernelSpec, gp_sample

SYNTHETIC_RANGE = (-2.0, 2.0)
SYNTHETIC_OOD_RANGE = (-5.0, 5.0)
SMARTMETER_RANGE = (0.0, 2.0)
SMARTMETER_OOD_RANGE = (-1.0, 5.0)
SYNTHETIC_COMPACT = ((-1.0, -0.5), (1.2, 1.7))
SMARTMETER_COMPACT = ((0.2, 0.4), (0.8, 1.1))
ADJACENT_DISTANCE = 0.25
MAX_CLIP_ATTEMPTS = 100


class ParseError(ValueError):
    """Malformed input file."""


class EmptyDataError(ValueError):
    """An input file yielded no usable rows."""


@dataclass(frozen=True)
class Task:
    x_context: np.ndarray
    y_context: np.ndarray
    x_target: np.ndarray
    y_target: np.ndarray

    def __post_init__(self):
        for name in ("x_context", "y_context", "x_target", "y_target"):
            arr = np.asarray(getattr(self, name), dtype=np.float64).reshape(-1)
            object.__setattr__(self, name, arr)
        if self.x_context.size < 1 or self.x_target.size < 1:
            raise ValueError("a task needs at least one context and one target point")
        if self.x_context.shape != self.y_context.shape or self.x_target.shape != self.y_target.shape:
            raise ValueError("positions and values must have matching lengths")
        if not all(np.all(np.isfinite(a)) for a in dataclasses.astuple(self)):
            raise ValueError("task coordinates must be finite")

    def to_record(self) -> dict:
        return {k: [float(v) for v in getattr(self, k)]
                for k in ("x_context", "y_context", "x_target", "y_target")}

    @classmethod
    def from_record(cls, rec: dict) -> "Task":
        return cls(*(np.asarray(rec[k], dtype=np.float64)
                     for k in ("x_context", "y_context", "x_target", "y_target")))


@dataclass(frozen=True)
class TaskConfig:
    x_low: float = SYNTHETIC_RANGE[0]
    x_high: float = SYNTHETIC_RANGE[1]
    n_points_low: int = 3
    n_points_high: int = 50
    batch_size: int = 16
    tasks_per_epoch: int = 256
    base_seed: int = 0

    def __post_init__(self):
        if not self.x_low < self.x_high:
            raise ValueError(f"x_low ({self.x_low}) must be below x_high ({self.x_high})")
        if not 1 <= self.n_points_low <= self.n_points_high:
            raise ValueError("need 1 <= n_points_low <= n_points_high")


@dataclass(frozen=True)
class SmartMeterSeries:
    timestamps: np.ndarray  # days since first reading
    readings: np.ndarray    # kWh per half-hour
    origin: datetime | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.timestamps.shape != self.readings.shape:
            raise ValueError("timestamps and readings differ in length")
        if np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("timestamps must be strictly ascending")


def _sizes(cfg: TaskConfig, task_index: int) -> tuple[int, int]:
    g = _rng.stream(cfg.base_seed, task_index, _rng.TASK_SIZES)
    n, m = g.integers(cfg.n_points_low, cfg.n_points_high + 1, size=2)
    return int(n), int(m)


def _joint_task(spec: KernelSpec, xc, xt, cfg: TaskConfig, task_index: int) -> Task:
    y = gp_sample(spec, np.concatenate([xc, xt]), (cfg.base_seed, task_index))
    return Task(xc, y[: xc.size], xt, y[xc.size:])


def sample_synthetic_task(spec: KernelSpec, cfg: TaskConfig, task_index: int) -> Task:
    n, m = _sizes(cfg, task_index)
    g = _rng.stream(cfg.base_seed, task_index, _rng.TASK_POSITIONS)
    x = g.uniform(cfg.x_low, cfg.x_high, size=n + m)
    return _joint_task(spec, x[:n], x[n:], cfg, task_index)


def ood_x_config(cfg: TaskConfig, smartmeter: bool = False) -> TaskConfig:
    lo, hi = SMARTMETER_OOD_RANGE if smartmeter else SYNTHETIC_OOD_RANGE
    return dataclasses.replace(cfg, x_low=lo, x_high=hi)


def ood_y_scale(task: Task, factor: float) -> Task:
    factor = float(factor)
    if not np.isfinite(factor) or factor == 0:
        raise ValueError(f"scale factor must be finite and nonzero, got {factor}")
    return Task(task.x_context, task.y_context * factor, task.x_target, task.y_target * factor)


def _check_intervals(intervals) -> np.ndarray:
    iv = np.asarray(intervals, dtype=np.float64).reshape(-1, 2)
    if iv.shape[0] == 0:
        raise ValueError("need at least one interval")
    if np.any(iv[:, 1] <= iv[:, 0]):
        raise ValueError(f"intervals must have positive width: {iv.tolist()}")
    return iv


def in_intervals(x, intervals) -> np.ndarray:
    iv = _check_intervals(intervals)
    x = np.asarray(x)[..., None]
    return np.any((x >= iv[:, 0]) & (x <= iv[:, 1]), axis=-1)


def distance_to_intervals(x, intervals) -> np.ndarray:
    """Distance from each x to the nearest interval (0 inside)."""
    iv = _check_intervals(intervals)
    x = np.asarray(x, dtype=np.float64)[..., None]
    d = np.maximum(iv[:, 0] - x, 0) + np.maximum(x - iv[:, 1], 0)
    return d.min(axis=-1)


def _uniform_on_union(g: np.random.Generator, iv: np.ndarray, size: int) -> np.ndarray:
    widths = iv[:, 1] - iv[:, 0]
    which = g.choice(len(iv), size=size, p=widths / widths.sum())
    return iv[which, 0] + g.uniform(size=size) * widths[which]


def _adjacent_bands(iv: np.ndarray, reach: float) -> np.ndarray:
    # Bands of width `reach` on either side of every interval.
    bands = np.concatenate([np.stack([iv[:, 0] - reach, iv[:, 0]], 1),
                            np.stack([iv[:, 1], iv[:, 1] + reach], 1)])
    return bands


def compacted_context_task(spec: KernelSpec, intervals, cfg: TaskConfig, task_index: int,
                           reach: float = ADJACENT_DISTANCE) -> Task:
    """Context confined to ``intervals``; targets within ``reach`` of an interval edge."""
    iv = _check_intervals(intervals)
    n, m = _sizes(cfg, task_index)
    g = _rng.stream(cfg.base_seed, task_index, _rng.TASK_POSITIONS)
    xc = _uniform_on_union(g, iv, n)
    xt = _uniform_on_union(g, _adjacent_bands(iv, reach), m)
    return _joint_task(spec, xc, xt, cfg, task_index)


# ---------------------------------------------------------------------------
# Smart Meter

_TIME_FORMAT = "%Y-%m-%d %H:%M:%S"


def load_smart_meter(path) -> SmartMeterSeries:
    """Read one household's ``timestamp,energy_kwh_hh`` CSV.

    ``Null`` readings are dropped; rows are sorted by time and duplicate
    timestamps are rejected.
    """
    path = Path(path)
    stamps, values = [], []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise EmptyDataError(f"{path}: empty file") from None
        try:
            t_col, v_col = header.index("timestamp"), header.index("energy_kwh_hh")
        except ValueError:
            raise ParseError(f"{path}:1: header must contain 'timestamp' and 'energy_kwh_hh'") from None
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) <= max(t_col, v_col):
                raise ParseError(f"{path}:{line}: expected {len(header)} columns, got {len(row)}")
            raw_t, raw_v = row[t_col].strip(), row[v_col].strip()
            try:
                t = datetime.strptime(raw_t, _TIME_FORMAT)
            except ValueError:
                raise ParseError(f"{path}:{line}: bad timestamp {raw_t!r}") from None
            if raw_v.lower() == "null":
                continue
            try:
                v = float(raw_v)
            except ValueError:
                raise ParseError(f"{path}:{line}: bad reading {raw_v!r}") from None
            if not np.isfinite(v) or v < 0:
                raise ParseError(f"{path}:{line}: reading must be finite and nonnegative, got {raw_v!r}")
            stamps.append(t)
            values.append(v)
    if not stamps:
        raise EmptyDataError(f"{path}: no usable readings")
    order = sorted(range(len(stamps)), key=stamps.__getitem__)
    stamps = [stamps[i] for i in order]
    values = [values[i] for i in order]
    for a, b in zip(stamps, stamps[1:]):
        if a == b:
            raise ParseError(f"{path}: duplicate timestamp {a.strftime(_TIME_FORMAT)}")
    origin = stamps[0]
    days = np.array([(t - origin).total_seconds() / 86400.0 for t in stamps])
    return SmartMeterSeries(days, np.asarray(values, dtype=np.float64), origin)


def window_to_unit(timestamps, start: float, x_low: float = SMARTMETER_RANGE[0]) -> np.ndarray:
    """Positions of readings in a window starting at ``start``: one day per unit, origin ``x_low``."""
    return x_low + (np.asarray(timestamps, dtype=np.float64) - start)


def _windows(series: SmartMeterSeries, cfg: TaskConfig, task_index: int):
    """Yield ``(generator, start, indices)`` for up to MAX_CLIP_ATTEMPTS random windows.

    The window spans ``x_high - x_low`` days, so the in-range protocol clips
    two days and the wide range clips six.
    """
    t = series.timestamps
    width = cfg.x_high - cfg.x_low
    span = t[-1] - t[0]
    if span < width:
        raise DegenerateInputError(f"series spans {span:.3f} days, need at least {width:g}")
    g = _rng.stream(cfg.base_seed, task_index, _rng.SMARTMETER)
    for _ in range(MAX_CLIP_ATTEMPTS):
        start = t[0] + g.uniform(0.0, span - width)
        yield g, start, np.flatnonzero((t >= start) & (t <= start + width))


def sample_smartmeter_task(series: SmartMeterSeries, cfg: TaskConfig, task_index: int) -> Task:
    for g, start, idx in _windows(series, cfg, task_index):
        if idx.size < 2 * cfg.n_points_low:
            continue
        cap = idx.size // 2
        n = int(g.integers(cfg.n_points_low, min(cfg.n_points_high, cap) + 1))
        m = int(g.integers(cfg.n_points_low, min(cfg.n_points_high, idx.size - n) + 1))
        pick = g.choice(idx, size=n + m, replace=False)
        x = window_to_unit(series.timestamps[pick], start, cfg.x_low)
        y = series.readings[pick]
        return Task(x[:n], y[:n], x[n:], y[n:])
    raise DegenerateInputError(
        f"no window with >= {2 * cfg.n_points_low} readings after {MAX_CLIP_ATTEMPTS} attempts"
    )


def compacted_smartmeter_task(series: SmartMeterSeries, cfg: TaskConfig, task_index: int,
                              intervals=SMARTMETER_COMPACT, reach: float = ADJACENT_DISTANCE) -> Task:
    """Window clip with context readings inside ``intervals`` and targets within ``reach`` of them."""
    iv = _check_intervals(intervals)
    for g, start, idx in _windows(series, cfg, task_index):
        x = window_to_unit(series.timestamps[idx], start, cfg.x_low)
        d = distance_to_intervals(x, iv)
        ctx, tgt = idx[d == 0], idx[(d > 0) & (d <= reach)]
        if ctx.size < 1 or tgt.size < 1:
            continue
        n = min(ctx.size, int(g.integers(cfg.n_points_low, cfg.n_points_high + 1)))
        m = min(tgt.size, int(g.integers(cfg.n_points_low, cfg.n_points_high + 1)))
        ctx, tgt = np.sort(g.choice(ctx, n, replace=False)), np.sort(g.choice(tgt, m, replace=False))
        t = series.timestamps
        return Task(window_to_unit(t[ctx], start, cfg.x_low), series.readings[ctx],
                    window_to_unit(t[tgt], start, cfg.x_low), series.readings[tgt])
    raise DegenerateInputError(f"no window with readings inside and next to {iv.tolist()}")


# ---------------------------------------------------------------------------
# task archives

def write_task_archive(tasks: Iterable[Task], path) -> int:
    count = 0
    with Path(path).open("w") as fh:
        for task in tasks:
            fh.write(json.dumps(task.to_record()) + "\n")
            count += 1
    return count


def read_task_archive(path) -> list[Task]:
    tasks = []
    with Path(path).open() as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                tasks.append(Task.from_record(json.loads(line)))
            except (ValueError, KeyError, TypeError) as err:
                raise ParseError(f"{path}:{lineno}: {err}") from None
    return tasks
