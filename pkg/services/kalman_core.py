"""
Vehicle Count Kalman Filter
Scalar Kalman filter that estimates the number of vehicles on a signalized
approach from probe arrivals/departures (state equation) and mean probe
travel time (measurement equation).
"""

import math
import logging
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np
from filterpy.kalman import predict as kf_predict
from filterpy.kalman import update as kf_update

from services.exceptions import ConfigurationError, DegenerateFilter, MeasurementUnavailable

logger = logging.getLogger(__name__)


class MissingPolicy(Enum):
    """What to do when an interval carries no usable travel-time measurement."""
    PROPAGATE_NAN = "propagate_nan"
    PREDICT_ONLY = "predict_only"

    @classmethod
    def _missing_(cls, value):
        # paper_nan is accepted as another spelling of propagate_nan
        if value == "paper_nan":
            return cls.PROPAGATE_NAN
        return None


@dataclass(frozen=True)
class FilterConfig:
    """Filter parameters. Defaults follow the erroneous-start setup (N0=5, P0=5, R=5)."""
    rho_fixed: float = 0.2
    rho_min: float = 0.5
    r_meas: float = 5.0
    n0: float = 5.0
    p0: float = 5.0
    clamp_nonnegative: bool = True

    def __post_init__(self):
        if not 0 < self.rho_fixed <= 1:
            raise ConfigurationError(f"rho_fixed must be in (0, 1], got {self.rho_fixed}")
        # rho_min = 0 disables the lower bound on the state equation
        if not 0 <= self.rho_min <= 1:
            raise ConfigurationError(f"rho_min must be in [0, 1], got {self.rho_min}")
        if self.r_meas < 0:
            raise ConfigurationError(f"r_meas must be >= 0, got {self.r_meas}")
        if self.p0 < 0:
            raise ConfigurationError(f"p0 must be >= 0, got {self.p0}")


@dataclass(frozen=True)
class FilterState:
    """Posterior estimate after `step` filter steps."""
    n_hat: float
    p_hat: float
    step: int = 0

    @classmethod
    def initial(cls, cfg: FilterConfig) -> "FilterState":
        """State before the first interval: (N0, P0)."""
        return cls(n_hat=float(cfg.n0), p_hat=float(cfg.p0), step=0)


@dataclass(frozen=True)
class IntervalObservation:
    """Everything the filter consumes for one estimation interval."""
    dt: float
    a_p: int
    d_p: int
    tt_mean: Optional[float] = None
    rho_interval: Optional[float] = None
    n_true: Optional[float] = None
    t_end: Optional[float] = None

    def __post_init__(self):
        if not self.dt > 0:
            raise ConfigurationError(f"interval duration must be > 0, got {self.dt}")
        if self.a_p < 0 or self.d_p < 0:
            raise ConfigurationError(f"probe counts must be >= 0, got a_p={self.a_p}, d_p={self.d_p}")
        if self.tt_mean is not None and not self.tt_mean > 0:
            raise ConfigurationError(f"mean travel time must be > 0, got {self.tt_mean}")
        if self.rho_interval is not None and not 0 < self.rho_interval <= 1:
            raise ConfigurationError(f"interval rho must be in (0, 1], got {self.rho_interval}")


@dataclass(frozen=True)
class StepRecord:
    """Trace of one filter step, one row of the step-records CSV."""
    step: int
    interval_end_s: Optional[float]
    dt_s: float
    a_p: int
    d_p: int
    rho_used: float
    h: Optional[float]
    tt_measured: Optional[float]
    tt_prior: Optional[float]
    n_prior: float
    gain: Optional[float]
    n_post: float
    p_post: float
    n_true: Optional[float] = None

    @property
    def is_undefined(self) -> bool:
        """True when this step carries no usable estimate."""
        return math.isnan(self.n_post)


def effective_rho(obs: IntervalObservation, cfg: FilterConfig) -> float:
    """Interval rho when known, otherwise the historical value."""
    return obs.rho_interval if obs.rho_interval is not None else cfg.rho_fixed


def _floor_at_zero(value: float, cfg: FilterConfig) -> float:
    # NaN compares False and passes through untouched
    if cfg.clamp_nonnegative and value < 0:
        return 0.0
    return value


def predict(state: FilterState, obs: IntervalObservation, cfg: FilterConfig) -> Tuple[float, float]:
    """A priori count and covariance from probe flow conservation with a rho floor."""
    rho_state = max(effective_rho(obs, cfg), cfg.rho_min)
    # Net probe flow is the control input, scaled up to all vehicles by 1/rho
    n_prior, p_prior = kf_predict(
        np.float64(state.n_hat), state.p_hat,
        F=1.0, Q=0.0, u=obs.a_p - obs.d_p, B=1.0 / rho_state,
    )
    return _floor_at_zero(float(n_prior), cfg), float(p_prior)


def measurement_vector(obs: IntervalObservation, cfg: FilterConfig) -> float:
    """Seconds per vehicle that map a count to the mean travel time (no rho floor)."""
    total = obs.a_p + obs.d_p
    if total == 0:
        raise MeasurementUnavailable(
            f"no probe arrivals or departures in a {obs.dt:.1f} s interval"
        )
    return 2.0 * effective_rho(obs, cfg) * obs.dt / total


def update(
    state_prior: Tuple[float, float],
    h: float,
    tt_measured: float,
    cfg: FilterConfig,
    step: int = 0,
) -> FilterState:
    """Correct the a priori estimate with a mean probe travel time."""
    n_post, p_post, _ = _correct(state_prior, h, tt_measured, cfg.r_meas)
    return FilterState(n_hat=_floor_at_zero(n_post, cfg), p_hat=p_post, step=step)


def _correct(
    state_prior: Tuple[float, float],
    h: float,
    tt_measured: float,
    r_meas: float,
) -> Tuple[float, float, float]:
    """Posterior count, posterior covariance and gain for one measurement."""
    n_prior, p_prior = state_prior
    if r_meas == 0:
        if p_prior == 0:
            raise DegenerateFilter("zero prior covariance with zero measurement noise gives a 0/0 gain")
        # Perfect measurement: the posterior is the measured count
        return tt_measured / h, 0.0, 1.0 / h

    n_post, p_post, _, gain, _, _ = kf_update(
        np.float64(n_prior), p_prior, tt_measured, r_meas, H=h, return_all=True,
    )
    gain = min(max(float(np.squeeze(gain)), 0.0), 1.0 / h)
    p_post = min(max(float(np.squeeze(p_post)), 0.0), p_prior)
    return float(np.squeeze(n_post)), p_post, gain


def kalman_gain(p_prior: float, h: float, r_meas: float) -> float:
    """Weight given to the travel-time innovation for a prior covariance."""
    return _correct((0.0, p_prior), h, 0.0, r_meas)[2]


def step(
    state: FilterState,
    obs: IntervalObservation,
    cfg: FilterConfig,
    missing_policy: MissingPolicy = MissingPolicy.PROPAGATE_NAN,
) -> Tuple[FilterState, StepRecord]:
    """One full predict/correct cycle plus its trace record."""
    n_prior, p_prior = predict(state, obs, cfg)
    rho_used = effective_rho(obs, cfg)
    next_step = state.step + 1

    h: Optional[float] = None
    try:
        h = measurement_vector(obs, cfg)
    except MeasurementUnavailable as e:
        logger.debug(f"Step {next_step}: {e}")

    if h is None or obs.tt_mean is None:
        if missing_policy is MissingPolicy.PROPAGATE_NAN:
            posterior = FilterState(n_hat=float("nan"), p_hat=p_prior, step=next_step)
        else:
            posterior = FilterState(n_hat=n_prior, p_hat=p_prior, step=next_step)
        record = StepRecord(
            step=next_step,
            interval_end_s=obs.t_end,
            dt_s=obs.dt,
            a_p=obs.a_p,
            d_p=obs.d_p,
            rho_used=rho_used,
            h=h,
            tt_measured=obs.tt_mean,
            tt_prior=None,
            n_prior=n_prior,
            gain=None if missing_policy is MissingPolicy.PROPAGATE_NAN else 0.0,
            n_post=posterior.n_hat,
            p_post=posterior.p_hat,
            n_true=obs.n_true,
        )
        return posterior, record

    n_post, p_post, gain = _correct((n_prior, p_prior), h, obs.tt_mean, cfg.r_meas)
    posterior = FilterState(n_hat=_floor_at_zero(n_post, cfg), p_hat=p_post, step=next_step)
    record = StepRecord(
        step=next_step,
        interval_end_s=obs.t_end,
        dt_s=obs.dt,
        a_p=obs.a_p,
        d_p=obs.d_p,
        rho_used=rho_used,
        h=h,
        tt_measured=obs.tt_mean,
        tt_prior=h * n_prior,
        n_prior=n_prior,
        gain=gain,
        n_post=posterior.n_hat,
        p_post=posterior.p_hat,
        n_true=obs.n_true,
    )
    logger.debug(
        f"Step {next_step}: n_prior={n_prior:.3f} h={h:.3f} tt={obs.tt_mean:.2f} "
        f"gain={gain:.4f} n_post={posterior.n_hat:.3f}"
    )
    return posterior, record


class VehicleCountFilter:
    """
    Stateful wrapper around the scalar recursion.
    One instance per replication; instances are never shared between workers.
    """

    def __init__(self, cfg: FilterConfig, missing_policy: MissingPolicy = MissingPolicy.PROPAGATE_NAN):
        self.cfg = cfg
        self.missing_policy = missing_policy
        self.state = FilterState.initial(cfg)
        self.records: List[StepRecord] = []

    def reset(self):
        """Return to the configured initial state and drop the trace."""
        self.state = FilterState.initial(self.cfg)
        self.records = []

    def step(self, obs: IntervalObservation) -> StepRecord:
        """Advance one interval and keep its record."""
        self.state, record = step(self.state, obs, self.cfg, self.missing_policy)
        self.records.append(record)
        return record

    def run(self, observations: Sequence[IntervalObservation]) -> List[StepRecord]:
        """Filter a whole observation sequence from the initial state."""
        self.reset()
        for obs in observations:
            self.step(obs)
        undefined = sum(1 for r in self.records if r.is_undefined)
        if undefined:
            logger.info(f"{undefined} of {len(self.records)} steps have undefined estimates")
        return list(self.records)
