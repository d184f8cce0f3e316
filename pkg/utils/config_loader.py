"""
Scenario Configuration
Loads flat YAML scenario files into a validated ScenarioConfig and back.
"""

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Optional

import yaml

from services.approach_sim import (
    ApproachGeometry,
    DemandProfile,
    SignalTiming,
    demand_for_vc,
)
from services.exceptions import ConfigurationError
from services.interval_scheduler import IntervalMode, ScheduleConfig
from services.kalman_core import FilterConfig, MissingPolicy
from services.probe_sampler import SamplingMethod, SamplingPlan
from services.rho_provider import DetectorLocation

logger = logging.getLogger(__name__)

DEFAULT_CONFIG_PATH = "config/system_config.yaml"

# Flat keys with their defaults (the empirical 74 m site)
DEFAULTS: Dict[str, Any] = {
    'approach_length_m': 74.0,
    'lanes': 1,
    'free_flow_speed_kmh': 40.0,
    'jam_density_veh_per_km_per_lane': 160.0,
    'cycle_s': 120.0,
    'green_s': 60.0,
    'lost_time_s': 3.0,
    'offset_s': 0.0,
    'arrival_rate_vph': 650.0,
    'vc_ratio': None,
    'saturation_flow_vphpl': 1800.0,
    'duration_s': 4500.0,
    'sim_seed': 42,
    'lmp': 0.2,
    'replications': 100,
    'base_seed': 1000,
    'sampling_method': 'bernoulli',
    'interval_mode': 'variable',
    'n_sample': 5,
    'fixed_dt_s': 20.0,
    't_start_s': 0.0,
    't_end_s': None,
    'rho_fixed': None,
    'rho_min': 0.5,
    'r_meas': 5.0,
    'n0': 5.0,
    'p0': 5.0,
    'clamp_nonnegative': True,
    'missing_policy': 'propagate_nan',
    'detector': 'none',
    'event_log_path': 'data/event_log.csv',
    'results_path': 'results/step_records.csv',
    'aggregates_path': 'results/aggregates.csv',
}


@dataclass(frozen=True)
class ScenarioConfig:
    """Everything one estimation run needs, from geometry to output paths."""
    geometry: ApproachGeometry = field(default_factory=ApproachGeometry)
    signal: SignalTiming = field(default_factory=SignalTiming)
    demand: DemandProfile = field(default_factory=DemandProfile)
    sampling: SamplingPlan = field(default_factory=SamplingPlan)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    detector: DetectorLocation = DetectorLocation.NONE
    missing_policy: MissingPolicy = MissingPolicy.PROPAGATE_NAN
    vc_ratio: Optional[float] = None
    rho_fixed_from_lmp: bool = True
    event_log_path: str = DEFAULTS['event_log_path']
    results_path: str = DEFAULTS['results_path']
    aggregates_path: str = DEFAULTS['aggregates_path']


def _number(mapping: Dict[str, Any], key: str, kind=float):
    value = mapping[key]
    if value is None:
        return None
    if isinstance(value, bool):
        raise ConfigurationError(f"{key}: expected a number, got {value!r}")
    try:
        converted = kind(value)
    except (TypeError, ValueError):
        raise ConfigurationError(f"{key}: expected {kind.__name__}, got {value!r}")
    if kind is int and converted != float(value):
        raise ConfigurationError(f"{key}: expected an integer, got {value!r}")
    return converted


def _enum(mapping: Dict[str, Any], key: str, enum_cls):
    value = mapping[key]
    if isinstance(value, enum_cls):
        return value
    try:
        return enum_cls(str(value).strip().lower())
    except ValueError:
        choices = ", ".join(e.value for e in enum_cls)
        raise ConfigurationError(f"{key}: {value!r} is not one of {choices}")


def _flag(mapping: Dict[str, Any], key: str) -> bool:
    value = mapping[key]
    if isinstance(value, bool):
        return value
    if str(value).strip().lower() in ('true', 'yes', '1', 'on'):
        return True
    if str(value).strip().lower() in ('false', 'no', '0', 'off'):
        return False
    raise ConfigurationError(f"{key}: expected true/false, got {value!r}")


def scenario_from_mapping(values: Dict[str, Any]) -> ScenarioConfig:
    """Build a ScenarioConfig from flat keys; missing keys take DEFAULTS."""
    unknown = sorted(set(values) - set(DEFAULTS))
    if unknown:
        raise ConfigurationError(f"unknown configuration keys: {', '.join(unknown)}")
    m = {**DEFAULTS, **values}

    geometry = ApproachGeometry(
        length_m=_number(m, 'approach_length_m'),
        lanes=_number(m, 'lanes', int),
        free_flow_speed_kmh=_number(m, 'free_flow_speed_kmh'),
        jam_density_veh_per_km_per_lane=_number(m, 'jam_density_veh_per_km_per_lane'),
    )
    signal = SignalTiming(
        cycle_s=_number(m, 'cycle_s'),
        green_s=_number(m, 'green_s'),
        lost_time_s=_number(m, 'lost_time_s'),
        offset_s=_number(m, 'offset_s'),
    )
    demand = DemandProfile(
        arrival_rate_vph=_number(m, 'arrival_rate_vph'),
        saturation_flow_vphpl=_number(m, 'saturation_flow_vphpl'),
        seed=_number(m, 'sim_seed', int),
        duration_s=_number(m, 'duration_s'),
    )
    vc_ratio = _number(m, 'vc_ratio')
    if vc_ratio is not None:
        demand = DemandProfile(
            arrival_rate_vph=demand_for_vc(vc_ratio, geometry, signal, demand),
            saturation_flow_vphpl=demand.saturation_flow_vphpl,
            seed=demand.seed,
            duration_s=demand.duration_s,
        )
    if demand.arrival_rate_vph > demand.saturation_flow_vphpl * geometry.lanes:
        raise ConfigurationError(
            f"demand {demand.arrival_rate_vph:.0f} veh/h exceeds the entrance discharge of "
            f"{demand.saturation_flow_vphpl * geometry.lanes:.0f} veh/h"
        )

    sampling = SamplingPlan(
        lmp=_number(m, 'lmp'),
        replications=_number(m, 'replications', int),
        base_seed=_number(m, 'base_seed', int),
        method=_enum(m, 'sampling_method', SamplingMethod),
    )
    schedule = ScheduleConfig(
        mode=_enum(m, 'interval_mode', IntervalMode),
        n_sample=_number(m, 'n_sample', int),
        fixed_dt=_number(m, 'fixed_dt_s'),
        t_start=_number(m, 't_start_s'),
        t_end=_number(m, 't_end_s'),
    )
    rho_fixed = _number(m, 'rho_fixed')
    filter_cfg = FilterConfig(
        rho_fixed=sampling.lmp if rho_fixed is None else rho_fixed,
        rho_min=_number(m, 'rho_min'),
        r_meas=_number(m, 'r_meas'),
        n0=_number(m, 'n0'),
        p0=_number(m, 'p0'),
        clamp_nonnegative=_flag(m, 'clamp_nonnegative'),
    )

    return ScenarioConfig(
        geometry=geometry,
        signal=signal,
        demand=demand,
        sampling=sampling,
        schedule=schedule,
        filter=filter_cfg,
        detector=_enum(m, 'detector', DetectorLocation),
        missing_policy=_enum(m, 'missing_policy', MissingPolicy),
        vc_ratio=vc_ratio,
        rho_fixed_from_lmp=rho_fixed is None,
        event_log_path=str(m['event_log_path']),
        results_path=str(m['results_path']),
        aggregates_path=str(m['aggregates_path']),
    )


def scenario_to_mapping(scenario: ScenarioConfig) -> Dict[str, Any]:
    """Flat-key view of a scenario; scenario_from_mapping inverts it."""
    return {
        'approach_length_m': scenario.geometry.length_m,
        'lanes': scenario.geometry.lanes,
        'free_flow_speed_kmh': scenario.geometry.free_flow_speed_kmh,
        'jam_density_veh_per_km_per_lane': scenario.geometry.jam_density_veh_per_km_per_lane,
        'cycle_s': scenario.signal.cycle_s,
        'green_s': scenario.signal.green_s,
        'lost_time_s': scenario.signal.lost_time_s,
        'offset_s': scenario.signal.offset_s,
        'arrival_rate_vph': scenario.demand.arrival_rate_vph,
        'vc_ratio': scenario.vc_ratio,
        'saturation_flow_vphpl': scenario.demand.saturation_flow_vphpl,
        'duration_s': scenario.demand.duration_s,
        'sim_seed': scenario.demand.seed,
        'lmp': scenario.sampling.lmp,
        'replications': scenario.sampling.replications,
        'base_seed': scenario.sampling.base_seed,
        'sampling_method': scenario.sampling.method.value,
        'interval_mode': scenario.schedule.mode.value,
        'n_sample': scenario.schedule.n_sample,
        'fixed_dt_s': scenario.schedule.fixed_dt,
        't_start_s': scenario.schedule.t_start,
        't_end_s': scenario.schedule.t_end,
        'rho_fixed': None if scenario.rho_fixed_from_lmp else scenario.filter.rho_fixed,
        'rho_min': scenario.filter.rho_min,
        'r_meas': scenario.filter.r_meas,
        'n0': scenario.filter.n0,
        'p0': scenario.filter.p0,
        'clamp_nonnegative': scenario.filter.clamp_nonnegative,
        'missing_policy': scenario.missing_policy.value,
        'detector': scenario.detector.value,
        'event_log_path': scenario.event_log_path,
        'results_path': scenario.results_path,
        'aggregates_path': scenario.aggregates_path,
    }


def with_overrides(scenario: ScenarioConfig, **overrides: Any) -> ScenarioConfig:
    """Copy of a scenario with some flat keys replaced (None values are ignored)."""
    changes = {k: v for k, v in overrides.items() if v is not None}
    if not changes:
        return scenario
    return scenario_from_mapping({**scenario_to_mapping(scenario), **changes})


def read_yaml_mapping(path: str) -> Dict[str, Any]:
    """Read a YAML file that must contain a single flat mapping."""
    try:
        with open(path, 'r', encoding='utf-8') as file:
            content = yaml.safe_load(file)
    except yaml.YAMLError as e:
        mark = getattr(e, 'problem_mark', None)
        where = f"{path}:{mark.line + 1}" if mark is not None else path
        raise ConfigurationError(f"{where}: invalid YAML ({e})")
    if content is None:
        return {}
    if not isinstance(content, dict):
        raise ConfigurationError(f"{path}: expected a key/value mapping at top level")
    return content


def load_scenario(path: Optional[str] = None) -> ScenarioConfig:
    """Load a scenario file; no path means the built-in defaults."""
    if path is None:
        return scenario_from_mapping({})
    values = read_yaml_mapping(path)
    try:
        scenario = scenario_from_mapping(values)
    except ConfigurationError as e:
        raise ConfigurationError(f"{path}: {e}")
    logger.info(f"Configuration loaded from {path}")
    return scenario


def config_hash(scenario: ScenarioConfig) -> str:
    """SHA-256 of the canonical flat mapping, for results metadata."""
    canonical = yaml.safe_dump(scenario_to_mapping(scenario), sort_keys=True)
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()
