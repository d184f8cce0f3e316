"""
Probe Sampler
Monte Carlo tagging of vehicles as probes at a target market penetration,
with one seeded random stream per replication.
"""

import logging
from dataclasses import dataclass, replace
from enum import Enum
from typing import Dict, Iterator, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from services.exceptions import ConfigurationError
from services.interval_scheduler import VehicleRecord

logger = logging.getLogger(__name__)

RNG_ALGORITHM = "numpy.random.PCG64"


class SamplingMethod(Enum):
    BERNOULLI = "bernoulli"
    EXACT = "exact"


@dataclass(frozen=True)
class SamplingPlan:
    lmp: float = 0.2
    replications: int = 100
    base_seed: int = 1000
    method: SamplingMethod = SamplingMethod.BERNOULLI

    def __post_init__(self):
        if not 0 < self.lmp <= 1:
            raise ConfigurationError(f"lmp must be in (0, 1], got {self.lmp}")
        if self.replications < 1:
            raise ConfigurationError(f"replications must be >= 1, got {self.replications}")

    def seed_for(self, replication: int) -> int:
        return self.base_seed + replication


class LmpSample(NamedTuple):
    probe_count: int
    total_count: int
    ratio: Optional[float]


def rng_metadata() -> Dict[str, str]:
    """Generator identity recorded alongside every results file."""
    return {"rng_algorithm": RNG_ALGORITHM, "numpy_version": np.__version__}


def tag(
    log: Sequence[VehicleRecord],
    lmp: float,
    seed: int,
    method: SamplingMethod = SamplingMethod.BERNOULLI,
) -> List[VehicleRecord]:
    """Mark vehicles as probes; timestamps and order are left untouched."""
    if not 0 < lmp <= 1:
        raise ConfigurationError(f"lmp must be in (0, 1], got {lmp}")
    if len(log) == 0:
        return []

    rng = np.random.default_rng(seed)
    if method is SamplingMethod.BERNOULLI:
        flags = rng.random(len(log)) < lmp
    else:
        k = int(round(lmp * len(log)))
        flags = np.zeros(len(log), dtype=bool)
        flags[rng.choice(len(log), size=k, replace=False)] = True

    return [replace(v, is_probe=bool(f)) for v, f in zip(log, flags)]


def replicate(log: Sequence[VehicleRecord], plan: SamplingPlan) -> Iterator[Tuple[int, List[VehicleRecord]]]:
    """Yield (replication, tagged log) for every replication of a plan."""
    for r in range(plan.replications):
        yield r, tag(log, plan.lmp, plan.seed_for(r), plan.method)


def realized_lmp_per_interval(
    tagged_log: Sequence[VehicleRecord],
    boundaries: Sequence[float],
) -> List[LmpSample]:
    """Probe share of stop-bar crossings in each interval (b[i-1], b[i]]."""
    exits = [v for v in tagged_log if v.t_exit is not None]
    all_times = np.sort(np.array([v.t_exit for v in exits], dtype=float))
    probe_times = np.sort(np.array([v.t_exit for v in exits if v.is_probe], dtype=float))
    bounds = np.asarray(boundaries, dtype=float)

    totals = np.diff(np.searchsorted(all_times, bounds, side="right"))
    probes = np.diff(np.searchsorted(probe_times, bounds, side="right"))
    return [
        LmpSample(int(p), int(t), float(p) / float(t) if t > 0 else None)
        for p, t in zip(probes, totals)
    ]


def probe_fraction(tagged_log: Sequence[VehicleRecord]) -> float:
    if len(tagged_log) == 0:
        return 0.0
    return sum(1 for v in tagged_log if v.is_probe) / len(tagged_log)
