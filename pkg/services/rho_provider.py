"""
Market Penetration Provider
Supplies the rho used by the filter for each estimation interval: either the
fixed historical value (probe-only approach) or the probe share of vehicles
crossing a single loop detector (fusion approach).
"""

import logging
from dataclasses import dataclass, replace
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np

from services.approach_sim import ApproachGeometry
from services.exceptions import ConfigurationError
from services.interval_scheduler import VehicleRecord, interval_bounds
from services.kalman_core import IntervalObservation

logger = logging.getLogger(__name__)


class DetectorLocation(Enum):
    NONE = "none"
    ENTRANCE = "entrance"
    MIDDLE = "middle"
    EXIT = "exit"


@dataclass(frozen=True)
class DetectorSpec:
    location: DetectorLocation = DetectorLocation.NONE
    position_m: float = 0.0

    @classmethod
    def at(cls, location: DetectorLocation, geom: ApproachGeometry) -> "DetectorSpec":
        positions = {
            DetectorLocation.NONE: 0.0,
            DetectorLocation.ENTRANCE: 0.0,
            DetectorLocation.MIDDLE: geom.length_m / 2.0,
            DetectorLocation.EXIT: geom.length_m,
        }
        return cls(location=location, position_m=positions[location])

    def validate(self, geom: ApproachGeometry):
        if not 0 <= self.position_m <= geom.length_m:
            raise ConfigurationError(
                f"detector position {self.position_m} m outside approach of {geom.length_m} m"
            )


def crossing_times(
    log: Sequence[VehicleRecord],
    spec: DetectorSpec,
    geom: ApproachGeometry,
) -> List[Tuple[float, bool]]:
    """(time, is_probe) for every vehicle that has crossed the detector line."""
    if spec.location is DetectorLocation.ENTRANCE:
        return [(v.t_entry, v.is_probe) for v in log]
    if spec.location is DetectorLocation.EXIT:
        return [(v.t_exit, v.is_probe) for v in log if v.t_exit is not None]
    if spec.location is DetectorLocation.NONE:
        return []

    speed = geom.free_flow_speed_ms
    remaining = (geom.length_m - spec.position_m) / speed
    spacing_m = 1000.0 / geom.jam_density_veh_per_km_per_lane / geom.lanes

    reach = np.sort(np.array([v.t_entry + geom.free_flow_time_s for v in log], dtype=float))
    exits = np.sort(np.array([v.t_exit for v in log if v.t_exit is not None], dtype=float))

    crossings = []
    for v in log:
        t_free = v.t_entry + spec.position_m / speed
        queued = (np.searchsorted(reach, t_free, side="right")
                  - np.searchsorted(exits, t_free, side="right"))
        if queued * spacing_m < geom.length_m - spec.position_m:
            # Queue tail is still downstream of the detector
            crossings.append((t_free, v.is_probe))
        elif v.t_exit is not None:
            crossings.append((v.t_exit - remaining, v.is_probe))
    return crossings


class RhoProvider:
    """Per-interval rho for one tagged log; crossing times are computed once."""

    def __init__(
        self,
        tagged_log: Sequence[VehicleRecord],
        spec: DetectorSpec,
        rho_fixed: float,
        geom: Optional[ApproachGeometry] = None,
    ):
        if not 0 < rho_fixed <= 1:
            raise ConfigurationError(f"rho_fixed must be in (0, 1], got {rho_fixed}")
        self.spec = spec
        self.rho_fixed = rho_fixed
        self.fallbacks = 0

        if spec.location is DetectorLocation.MIDDLE and geom is None:
            raise ConfigurationError("a middle detector needs the approach geometry")
        if geom is not None:
            spec.validate(geom)

        events = crossing_times(tagged_log, spec, geom) if spec.location is not DetectorLocation.NONE else []
        self._all = np.sort(np.array([t for t, _ in events], dtype=float))
        self._probes = np.sort(np.array([t for t, p in events if p], dtype=float))

    def rho_for_interval(self, t_from: float, t_to: float) -> float:
        if self.spec.location is DetectorLocation.NONE:
            return self.rho_fixed
        total = (np.searchsorted(self._all, t_to, side="right")
                 - np.searchsorted(self._all, t_from, side="right"))
        if total == 0:
            self.fallbacks += 1
            return self.rho_fixed
        probes = (np.searchsorted(self._probes, t_to, side="right")
                  - np.searchsorted(self._probes, t_from, side="right"))
        if probes == 0:
            # No probe crossed the detector: keep rho strictly positive
            self.fallbacks += 1
            return self.rho_fixed
        return float(probes) / float(total)

    def annotate(self, observations: Sequence[IntervalObservation], t_start: float) -> List[IntervalObservation]:
        """Attach the interval rho to every observation."""
        bounds = interval_bounds(observations, t_start)
        annotated = [
            replace(obs, rho_interval=self.rho_for_interval(t_from, t_to))
            for obs, t_from, t_to in zip(observations, bounds[:-1], bounds[1:])
        ]
        if self.fallbacks:
            logger.debug(f"{self.fallbacks} intervals fell back to rho_fixed={self.rho_fixed}")
        return annotated


def rho_for_interval(
    tagged_log: Sequence[VehicleRecord],
    interval: Tuple[float, float],
    spec: DetectorSpec,
    rho_fixed: float,
    geom: Optional[ApproachGeometry] = None,
) -> float:
    """Rho for a single interval (t_from, t_to]."""
    t_from, t_to = interval
    return RhoProvider(tagged_log, spec, rho_fixed, geom).rho_for_interval(t_from, t_to)
