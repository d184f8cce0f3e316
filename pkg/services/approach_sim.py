"""
Signalized Approach Simulator
Generates ground-truth entrance/stop-bar crossing logs for a single approach
controlled by a fixed-time signal. Vehicles travel at free-flow speed to a
vertical queue at the stop bar, discharge at saturation headway during
effective green, and are held at the entrance when the approach is full.
"""

import math
import logging
from dataclasses import dataclass
from typing import List

import numpy as np

from services.exceptions import ConfigurationError
from services.interval_scheduler import VehicleRecord

logger = logging.getLogger(__name__)

# Timestamps carry microsecond resolution so the event-log CSV round-trips exactly
TIME_RESOLUTION_DIGITS = 6


@dataclass(frozen=True)
class ApproachGeometry:
    length_m: float = 74.0
    lanes: int = 1
    free_flow_speed_kmh: float = 40.0
    jam_density_veh_per_km_per_lane: float = 160.0

    def __post_init__(self):
        if not self.length_m > 0:
            raise ConfigurationError(f"length_m must be > 0, got {self.length_m}")
        if self.lanes < 1:
            raise ConfigurationError(f"lanes must be >= 1, got {self.lanes}")
        if not self.free_flow_speed_kmh > 0:
            raise ConfigurationError(f"free_flow_speed_kmh must be > 0, got {self.free_flow_speed_kmh}")
        if self.capacity_vehicles < 1:
            raise ConfigurationError(
                f"approach stores no vehicle: {self.length_m} m at "
                f"{self.jam_density_veh_per_km_per_lane} veh/km/lane"
            )

    @property
    def capacity_vehicles(self) -> int:
        """Jam-density storage of the whole approach."""
        return int(math.floor(self.length_m / 1000.0 * self.jam_density_veh_per_km_per_lane * self.lanes))

    @property
    def free_flow_speed_ms(self) -> float:
        return self.free_flow_speed_kmh / 3.6

    @property
    def free_flow_time_s(self) -> float:
        return self.length_m / self.free_flow_speed_ms


@dataclass(frozen=True)
class SignalTiming:
    cycle_s: float = 120.0
    green_s: float = 60.0
    lost_time_s: float = 3.0
    offset_s: float = 0.0

    def __post_init__(self):
        if not 0 < self.green_s <= self.cycle_s:
            raise ConfigurationError(f"green_s must be in (0, cycle_s], got {self.green_s}")
        if self.lost_time_s < 0 or self.lost_time_s >= self.green_s:
            raise ConfigurationError(f"lost_time_s must be in [0, green_s), got {self.lost_time_s}")

    @property
    def effective_green_s(self) -> float:
        return self.green_s - self.lost_time_s

    def next_departure_time(self, t: float) -> float:
        """Earliest time >= t inside an effective-green window [start, start + g)."""
        k = math.floor((t - self.offset_s) / self.cycle_s)
        cycle_start = self.offset_s + k * self.cycle_s
        if t - cycle_start < self.effective_green_s:
            return t
        return cycle_start + self.cycle_s


@dataclass(frozen=True)
class DemandProfile:
    arrival_rate_vph: float = 650.0
    saturation_flow_vphpl: float = 1800.0
    seed: int = 42
    duration_s: float = 4500.0

    def __post_init__(self):
        if self.arrival_rate_vph < 0:
            raise ConfigurationError(f"arrival_rate_vph must be >= 0, got {self.arrival_rate_vph}")
        if not self.saturation_flow_vphpl > 0:
            raise ConfigurationError(f"saturation_flow_vphpl must be > 0, got {self.saturation_flow_vphpl}")
        if not self.duration_s > 0:
            raise ConfigurationError(f"duration_s must be > 0, got {self.duration_s}")


def capacity(geom: ApproachGeometry, sig: SignalTiming, dem: DemandProfile) -> float:
    """Approach capacity in veh/h from saturation flow and effective green ratio."""
    return dem.saturation_flow_vphpl * geom.lanes * sig.effective_green_s / sig.cycle_s


def demand_for_vc(vc_ratio: float, geom: ApproachGeometry, sig: SignalTiming, dem: DemandProfile) -> float:
    """Arrival rate (veh/h) that realises a target v/c ratio."""
    if vc_ratio < 0:
        raise ConfigurationError(f"vc_ratio must be >= 0, got {vc_ratio}")
    return vc_ratio * capacity(geom, sig, dem)


def saturation_headway(geom: ApproachGeometry, dem: DemandProfile) -> float:
    return 3600.0 / (dem.saturation_flow_vphpl * geom.lanes)


def _quantize(t: float) -> float:
    return round(t, TIME_RESOLUTION_DIGITS)


def _quantize_up(t: float) -> float:
    """Smallest grid time not earlier than t (sub-nanosecond noise ignored)."""
    scale = 10 ** TIME_RESOLUTION_DIGITS
    return math.ceil(round(t * scale, 3)) / scale


def _poisson_arrivals(rng: np.random.Generator, rate_per_s: float, duration_s: float) -> np.ndarray:
    if rate_per_s <= 0:
        return np.empty(0)
    expected = rate_per_s * duration_s
    chunk = int(expected + 6 * math.sqrt(expected) + 16)
    times = np.cumsum(rng.exponential(1.0 / rate_per_s, size=chunk))
    while times[-1] < duration_s:
        more = times[-1] + np.cumsum(rng.exponential(1.0 / rate_per_s, size=chunk))
        times = np.concatenate([times, more])
    return times[times < duration_s]


def simulate(geom: ApproachGeometry, sig: SignalTiming, dem: DemandProfile) -> List[VehicleRecord]:
    """Simulate one run; vehicles that never enter within the horizon are omitted."""
    rng = np.random.default_rng(dem.seed)
    arrivals = _poisson_arrivals(rng, dem.arrival_rate_vph / 3600.0, dem.duration_s)

    storage = geom.capacity_vehicles
    travel = geom.free_flow_time_s
    headway = saturation_headway(geom, dem)

    entries: List[float] = []
    departures: List[float] = []
    for i, arrival in enumerate(arrivals):
        t_entry = _quantize(float(arrival))
        if i >= storage:
            # Spillback: wait until the vehicle `storage` places ahead has left
            t_entry = max(t_entry, departures[i - storage])
        if entries:
            t_entry = max(t_entry, entries[-1])
        ready = t_entry + travel
        if departures:
            ready = max(ready, departures[-1] + headway)
        t_depart = _quantize(sig.next_departure_time(_quantize_up(ready)))
        entries.append(t_entry)
        departures.append(t_depart)

    log = []
    for vehicle_id, (t_entry, t_depart) in enumerate(zip(entries, departures)):
        if t_entry >= dem.duration_s:
            break
        log.append(VehicleRecord(
            vehicle_id=vehicle_id,
            t_entry=t_entry,
            t_exit=t_depart if t_depart <= dem.duration_s else None,
        ))

    held = sum(1 for a, e in zip(arrivals, entries) if e > _quantize(float(a)))
    logger.info(
        f"Simulated {len(log)} vehicles over {dem.duration_s:.0f} s "
        f"({dem.arrival_rate_vph:.0f} veh/h, {held} held at entrance)"
    )
    return log
