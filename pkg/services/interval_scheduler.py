"""
Estimation Interval Scheduler
Turns a vehicle event log into filter observations, either with a variable
interval that closes once n probes have crossed the stop bar or with a
constant interval length.
"""

import math
import logging
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Sequence

import numpy as np

from services.exceptions import ConfigurationError, NoProbesError
from services.kalman_core import IntervalObservation

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class VehicleRecord:
    """Entrance and stop-bar crossing times of one vehicle."""
    vehicle_id: int
    t_entry: float
    t_exit: Optional[float] = None
    is_probe: bool = False

    @property
    def travel_time(self) -> Optional[float]:
        if self.t_exit is None:
            return None
        return self.t_exit - self.t_entry


class IntervalMode(Enum):
    VARIABLE = "variable"
    FIXED = "fixed"


@dataclass(frozen=True)
class ScheduleConfig:
    """Interval construction settings; t_end=None means the last event in the log."""
    mode: IntervalMode = IntervalMode.VARIABLE
    n_sample: int = 5
    fixed_dt: float = 20.0
    t_start: float = 0.0
    t_end: Optional[float] = None

    def __post_init__(self):
        if self.mode is IntervalMode.VARIABLE and self.n_sample < 1:
            raise ConfigurationError(f"n_sample must be >= 1, got {self.n_sample}")
        if self.mode is IntervalMode.FIXED and not self.fixed_dt > 0:
            raise ConfigurationError(f"fixed_dt must be > 0, got {self.fixed_dt}")
        if self.t_end is not None and not self.t_end > self.t_start:
            raise ConfigurationError(
                f"observation window is empty: t_start={self.t_start}, t_end={self.t_end}"
            )


def _window_end(log: Sequence[VehicleRecord], cfg: ScheduleConfig) -> float:
    if cfg.t_end is not None:
        return cfg.t_end
    last = max(max(v.t_entry, v.t_exit if v.t_exit is not None else v.t_entry) for v in log)
    return last


def ground_truth_counts(log: Sequence[VehicleRecord], boundaries: Sequence[float]) -> List[int]:
    """Vehicles physically on the approach at each boundary time."""
    times = np.asarray(boundaries, dtype=float)
    if len(log) == 0:
        return [0] * len(times)
    entries = np.sort(np.array([v.t_entry for v in log], dtype=float))
    exits = np.sort(np.array([v.t_exit for v in log if v.t_exit is not None], dtype=float))
    # t_exit > t_entry, so every exited vehicle has also entered
    entered = np.searchsorted(entries, times, side="right")
    left = np.searchsorted(exits, times, side="right")
    return [int(c) for c in entered - left]


def _probe_arrays(log: Sequence[VehicleRecord]):
    probes = [v for v in log if v.is_probe]
    entries = np.sort(np.array([v.t_entry for v in probes], dtype=float))
    exited = sorted(
        (v for v in probes if v.t_exit is not None),
        key=lambda v: (v.t_exit, v.vehicle_id),
    )
    return entries, exited


def _count_in(sorted_times: np.ndarray, t_from: float, t_to: float) -> int:
    """Events in the half-open window (t_from, t_to]."""
    lo = np.searchsorted(sorted_times, t_from, side="right")
    hi = np.searchsorted(sorted_times, t_to, side="right")
    return int(hi - lo)


def _schedule_variable(log, cfg: ScheduleConfig, t_end: float) -> List[IntervalObservation]:
    entries, exited = _probe_arrays(log)
    window_exits = [v for v in exited if cfg.t_start < v.t_exit <= t_end]
    if not window_exits:
        raise NoProbesError(
            f"no probe reached the stop bar between {cfg.t_start:.1f} s and {t_end:.1f} s"
        )

    observations = []
    boundaries = []
    batches = []
    i = 0
    t_prev = cfg.t_start
    while i + cfg.n_sample <= len(window_exits):
        j = i + cfg.n_sample - 1
        t_close = window_exits[j].t_exit
        # Probes tied with the closing probe all belong to this interval
        while j + 1 < len(window_exits) and window_exits[j + 1].t_exit == t_close:
            j += 1
        batch = window_exits[i:j + 1]
        boundaries.append(t_close)
        batches.append((t_prev, t_close, batch))
        t_prev = t_close
        i = j + 1

    dropped = len(window_exits) - i
    if dropped:
        logger.debug(f"Discarded trailing partial interval with {dropped} probe exits")

    truth = ground_truth_counts(log, boundaries)
    for (t_from, t_to, batch), n_true in zip(batches, truth):
        observations.append(IntervalObservation(
            dt=t_to - t_from,
            a_p=_count_in(entries, t_from, t_to),
            d_p=len(batch),
            tt_mean=float(np.mean([v.travel_time for v in batch])),
            n_true=n_true,
            t_end=t_to,
        ))
    return observations


def _schedule_fixed(log, cfg: ScheduleConfig, t_end: float) -> List[IntervalObservation]:
    entries, exited = _probe_arrays(log)
    exit_times = np.array([v.t_exit for v in exited], dtype=float)
    travel_times = np.array([v.travel_time for v in exited], dtype=float)

    n_intervals = max(1, math.ceil((t_end - cfg.t_start) / cfg.fixed_dt - 1e-9))
    boundaries = [min(cfg.t_start + k * cfg.fixed_dt, t_end) for k in range(1, n_intervals + 1)]
    boundaries[-1] = t_end
    truth = ground_truth_counts(log, boundaries)

    observations = []
    t_prev = cfg.t_start
    for t_close, n_true in zip(boundaries, truth):
        lo = np.searchsorted(exit_times, t_prev, side="right")
        hi = np.searchsorted(exit_times, t_close, side="right")
        d_p = int(hi - lo)
        observations.append(IntervalObservation(
            dt=t_close - t_prev,
            a_p=_count_in(entries, t_prev, t_close),
            d_p=d_p,
            tt_mean=float(travel_times[lo:hi].mean()) if d_p else None,
            n_true=n_true,
            t_end=t_close,
        ))
        t_prev = t_close
    return observations


def schedule(log: Sequence[VehicleRecord], cfg: ScheduleConfig) -> List[IntervalObservation]:
    """Build the observation sequence for one (tagged) event log."""
    if len(log) == 0:
        return []
    log = sorted(log, key=lambda v: (v.t_entry, v.vehicle_id))
    t_end = _window_end(log, cfg)
    if not t_end > cfg.t_start:
        raise ConfigurationError(f"observation window is empty: [{cfg.t_start}, {t_end}]")

    if cfg.mode is IntervalMode.VARIABLE:
        observations = _schedule_variable(log, cfg, t_end)
    else:
        observations = _schedule_fixed(log, cfg, t_end)

    logger.debug(f"Scheduled {len(observations)} {cfg.mode.value} intervals over [{cfg.t_start}, {t_end}]")
    return observations


def interval_bounds(observations: Sequence[IntervalObservation], t_start: float) -> List[float]:
    """Boundary list [t_start, t_1, ..., t_K] of a scheduled observation sequence."""
    bounds = [t_start]
    for obs in observations:
        bounds.append(obs.t_end if obs.t_end is not None else bounds[-1] + obs.dt)
    return bounds
