"""
Evaluation Engine
Scores estimated vehicle counts against ground truth (RRMSE and RMSE), runs
the full simulate -> tag -> schedule -> filter pipeline, and drives Monte
Carlo sensitivity sweeps over LMP, sample size, interval length, demand,
approach length and detector location.
"""

import math
import itertools
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.stats import spearmanr
from tqdm import tqdm

from services.approach_sim import simulate
from services.exceptions import ConfigurationError, DataError, EstimationError, NoProbesError
from services.interval_scheduler import VehicleRecord, interval_bounds, schedule
from services.kalman_core import StepRecord, VehicleCountFilter
from services.probe_sampler import probe_fraction, realized_lmp_per_interval, rng_metadata, tag
from services.rho_provider import DetectorSpec, RhoProvider
from utils.config_loader import (
    ScenarioConfig,
    config_hash,
    read_yaml_mapping,
    load_scenario,
    with_overrides,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Score:
    rrmse_pct: float
    rmse_veh: float
    n_steps: int
    undefined_steps: int
    sse: float
    sum_true: float


@dataclass
class RunResult:
    """Outcome of one estimation run (one tagged replication)."""
    step_records: List[StepRecord]
    rrmse_pct: float
    rmse_veh: float
    n_steps: int
    undefined_steps: int
    mean_dt_s: float = float('nan')
    max_dt_s: float = float('nan')
    realized_lmp: float = float('nan')
    probe_share: float = float('nan')
    sse: float = float('nan')
    sum_true: float = float('nan')

    @property
    def is_defined(self) -> bool:
        return not math.isnan(self.rrmse_pct) and not math.isnan(self.rmse_veh)


def score(records: Sequence[StepRecord]) -> Score:
    """RRMSE (%) and RMSE (veh) of posterior estimates against ground truth."""
    if len(records) == 0:
        raise DataError("no estimation steps to score")
    if any(r.n_true is None for r in records):
        raise DataError("every step record needs a ground-truth count to be scored")

    estimates = np.array([r.n_post for r in records], dtype=float)
    truth = np.array([r.n_true for r in records], dtype=float)
    s = len(records)
    undefined = int(np.isnan(estimates).sum())
    sum_true = float(truth.sum())
    if undefined:
        return Score(float('nan'), float('nan'), s, undefined, float('nan'), sum_true)

    sse = float(np.sum((estimates - truth) ** 2))
    rmse = math.sqrt(sse / s)
    rrmse = 100.0 * math.sqrt(s * sse) / sum_true if sum_true > 0 else float('nan')
    return Score(rrmse, rmse, s, 0, sse, sum_true)


def estimate_log(
    log: Sequence[VehicleRecord],
    scenario: ScenarioConfig,
    seed: Optional[int] = None,
    t_end: Optional[float] = None,
) -> RunResult:
    """
    Run the estimator on an event log.

    With a seed the log is re-tagged at the scenario LMP; without one the
    existing is_probe flags are used as recorded.
    """
    if seed is not None:
        tagged = tag(log, scenario.sampling.lmp, seed, scenario.sampling.method)
    else:
        tagged = list(log)

    schedule_cfg = scenario.schedule
    if t_end is not None and schedule_cfg.t_end is None:
        schedule_cfg = replace(schedule_cfg, t_end=t_end)

    observations = schedule(tagged, schedule_cfg)
    if not observations:
        raise NoProbesError(
            f"fewer than {schedule_cfg.n_sample} probes reached the stop bar; no interval closed"
        )

    spec = DetectorSpec.at(scenario.detector, scenario.geometry)
    provider = RhoProvider(tagged, spec, scenario.filter.rho_fixed, scenario.geometry)
    observations = provider.annotate(observations, schedule_cfg.t_start)

    records = VehicleCountFilter(scenario.filter, scenario.missing_policy).run(observations)
    result = score(records)

    bounds = interval_bounds(observations, schedule_cfg.t_start)
    ratios = [s.ratio for s in realized_lmp_per_interval(tagged, bounds) if s.ratio is not None]
    dts = [obs.dt for obs in observations]

    return RunResult(
        step_records=records,
        rrmse_pct=result.rrmse_pct,
        rmse_veh=result.rmse_veh,
        n_steps=result.n_steps,
        undefined_steps=result.undefined_steps,
        mean_dt_s=float(np.mean(dts)),
        max_dt_s=float(np.max(dts)),
        realized_lmp=float(np.mean(ratios)) if ratios else float('nan'),
        probe_share=probe_fraction(tagged),
        sse=result.sse,
        sum_true=result.sum_true,
    )


def run_scenario(
    scenario: ScenarioConfig,
    replication: int = 0,
    log: Optional[Sequence[VehicleRecord]] = None,
) -> RunResult:
    """Simulate (unless a log is given), tag with the replication seed, estimate and score."""
    if log is None:
        log = simulate(scenario.geometry, scenario.signal, scenario.demand)
    return estimate_log(
        log,
        scenario,
        seed=scenario.sampling.seed_for(replication),
        t_end=scenario.demand.duration_s,
    )


# Sweep axes mapped onto flat configuration keys
AXES: Dict[str, Callable[[Any], Dict[str, Any]]] = {
    'lmp': lambda v: {'lmp': float(v)},
    'sample_size': lambda v: {'n_sample': int(v), 'interval_mode': 'variable'},
    'fixed_dt': lambda v: (
        {'interval_mode': 'variable'} if str(v) == 'variable'
        else {'interval_mode': 'fixed', 'fixed_dt_s': float(v)}
    ),
    'vc_ratio': lambda v: {'vc_ratio': float(v)},
    'approach_length': lambda v: {'approach_length_m': float(v)},
    'detector_location': lambda v: {'detector': str(v)},
}


def apply_axis(scenario: ScenarioConfig, axis: str, value: Any) -> ScenarioConfig:
    if axis not in AXES:
        raise ConfigurationError(f"unknown sweep axis {axis!r}; choose from {', '.join(AXES)}")
    return with_overrides(scenario, **AXES[axis](value))


@dataclass(frozen=True)
class SweepSpec:
    """Grid of axis values; extra_axes add further dimensions to the grid."""
    axis: str
    values: Tuple[Any, ...]
    base_scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    extra_axes: Tuple[Tuple[str, Tuple[Any, ...]], ...] = ()

    def __post_init__(self):
        for name, values in self.axes:
            if name not in AXES:
                raise ConfigurationError(f"unknown sweep axis {name!r}; choose from {', '.join(AXES)}")
            if len(values) == 0:
                raise ConfigurationError(f"sweep axis {name!r} has no values")
        names = [name for name, _ in self.axes]
        if len(set(names)) != len(names):
            raise ConfigurationError(f"sweep axes repeat: {names}")
        # Fail early on illegal values rather than inside a worker
        for cell in self.cells():
            self.scenario_for(cell)

    @property
    def axes(self) -> Tuple[Tuple[str, Tuple[Any, ...]], ...]:
        return ((self.axis, tuple(self.values)),) + tuple(self.extra_axes)

    @property
    def axis_names(self) -> List[str]:
        return [name for name, _ in self.axes]

    def cells(self) -> List[Tuple[Any, ...]]:
        return list(itertools.product(*(values for _, values in self.axes)))

    def scenario_for(self, cell: Tuple[Any, ...]) -> ScenarioConfig:
        scenario = self.base_scenario
        for (name, _), value in zip(self.axes, cell):
            scenario = apply_axis(scenario, name, value)
        return scenario


@dataclass
class SweepResult:
    results: pd.DataFrame
    aggregates: pd.DataFrame
    metadata: Dict[str, Any]


def _run_cell(args: Tuple[Tuple[str, ...], Tuple[Any, ...], ScenarioConfig]) -> List[Dict[str, Any]]:
    """All replications of one sweep cell. Top-level so worker processes can import it."""
    names, cell, scenario = args
    rows = []
    try:
        log = simulate(scenario.geometry, scenario.signal, scenario.demand)
    except EstimationError as e:
        logger.warning(f"Cell {dict(zip(names, cell))} failed to simulate: {e}")
        log = None
        sim_error = str(e)

    for r in range(scenario.sampling.replications):
        row: Dict[str, Any] = dict(zip(names, cell))
        row.update({'replication': r, 'seed': scenario.sampling.seed_for(r)})
        try:
            if log is None:
                raise EstimationError(sim_error)
            result = run_scenario(scenario, replication=r, log=log)
            row.update({
                'rrmse_pct': result.rrmse_pct,
                'rmse_veh': result.rmse_veh,
                'n_steps': result.n_steps,
                'undefined_steps': result.undefined_steps,
                'mean_dt_s': result.mean_dt_s,
                'max_dt_s': result.max_dt_s,
                'realized_lmp': result.realized_lmp,
                'sse': result.sse,
                'sum_true': result.sum_true,
                'error': '',
            })
        except EstimationError as e:
            logger.warning(f"Cell {dict(zip(names, cell))} replication {r}: {e}")
            row.update({
                'rrmse_pct': float('nan'),
                'rmse_veh': float('nan'),
                'n_steps': 0,
                'undefined_steps': 0,
                'mean_dt_s': float('nan'),
                'max_dt_s': float('nan'),
                'realized_lmp': float('nan'),
                'sse': float('nan'),
                'sum_true': float('nan'),
                'error': f"{type(e).__name__}: {e}",
            })
        rows.append(row)
    return rows


def _aggregate_group(group: pd.DataFrame) -> Dict[str, Any]:
    failed = group['error'] != ''
    undefined = (group['undefined_steps'] > 0) & ~failed
    defined = group[~failed & ~undefined & group['rrmse_pct'].notna()]

    pooled_s = defined['n_steps'].sum()
    pooled_sse = defined['sse'].sum()
    pooled_true = defined['sum_true'].sum()
    all_defined = len(defined) == len(group)

    return {
        'runs': len(group),
        'defined_runs': len(defined),
        'undefined_runs': int(undefined.sum()),
        'failed_runs': int(failed.sum()),
        # Any undefined replication makes the mean-of-runs undefined
        'mean_rrmse_pct': defined['rrmse_pct'].mean() if all_defined else float('nan'),
        'mean_rmse_veh': defined['rmse_veh'].mean() if all_defined else float('nan'),
        'defined_mean_rrmse_pct': defined['rrmse_pct'].mean(),
        'std_rrmse_pct': defined['rrmse_pct'].std(ddof=0),
        'defined_mean_rmse_veh': defined['rmse_veh'].mean(),
        'std_rmse_veh': defined['rmse_veh'].std(ddof=0),
        'pooled_rrmse_pct': (
            100.0 * math.sqrt(pooled_s * pooled_sse) / pooled_true
            if pooled_s > 0 and pooled_true > 0 else float('nan')
        ),
        'pooled_rmse_veh': math.sqrt(pooled_sse / pooled_s) if pooled_s > 0 else float('nan'),
        'mean_dt_s': group['mean_dt_s'].mean(),
        'max_dt_s': group['max_dt_s'].max(),
        'mean_realized_lmp': group['realized_lmp'].mean(),
    }


def aggregate(results: pd.DataFrame, axis_names: Sequence[str]) -> pd.DataFrame:
    """Per-cell statistics over replications; independent of replication order."""
    rows = []
    for key, group in results.groupby(list(axis_names), sort=False, dropna=False):
        key = key if isinstance(key, tuple) else (key,)
        row = dict(zip(axis_names, key))
        row.update(_aggregate_group(group))
        rows.append(row)
    return pd.DataFrame(rows)


def sweep(spec: SweepSpec, workers: int = 1, progress: bool = False) -> SweepResult:
    """Run every cell of a sweep; failed replications are recorded, never fatal."""
    names = tuple(spec.axis_names)
    jobs = [(names, cell, spec.scenario_for(cell)) for cell in spec.cells()]
    logger.info(
        f"Sweeping {' x '.join(names)}: {len(jobs)} cells x "
        f"{spec.base_scenario.sampling.replications} replications"
    )

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            cell_rows = list(tqdm(pool.map(_run_cell, jobs), total=len(jobs), disable=not progress))
    else:
        cell_rows = [_run_cell(job) for job in tqdm(jobs, disable=not progress)]

    # pool.map keeps job order, so rows come out in canonical cell order
    results = pd.DataFrame([row for rows in cell_rows for row in rows])
    aggregates = aggregate(results, names)

    metadata = {
        'axes': ', '.join(f"{name}={list(values)}" for name, values in spec.axes),
        'replications': spec.base_scenario.sampling.replications,
        'base_seed': spec.base_scenario.sampling.base_seed,
        'sim_seed': spec.base_scenario.demand.seed,
        'config_sha256': config_hash(spec.base_scenario),
        **rng_metadata(),
    }
    return SweepResult(results=results, aggregates=aggregates, metadata=metadata)


def trend_correlation(aggregates: pd.DataFrame, axis: str, metric: str = 'mean_rrmse_pct') -> float:
    """Spearman rank correlation of a per-cell metric against a numeric axis."""
    data = aggregates[[axis, metric]].dropna()
    if len(data) < 2:
        return float('nan')
    rho, _ = spearmanr(data[axis].astype(float), data[metric].astype(float))
    return float(rho)


def plot_data(results: pd.DataFrame, axis_names: Sequence[str]) -> pd.DataFrame:
    """Long-form (axis, x, series, metric, mean, stddev) rows for external plotting."""
    metrics = ['rrmse_pct', 'rmse_veh', 'mean_dt_s']
    rows = []
    for axis in axis_names:
        others = [a for a in axis_names if a != axis]
        group_keys = others + [axis]
        for key, group in results.groupby(group_keys, sort=False, dropna=False):
            key = key if isinstance(key, tuple) else (key,)
            labels = dict(zip(group_keys, key))
            series = ', '.join(f"{a}={labels[a]}" for a in others) or 'all'
            for metric in metrics:
                values = group[metric].dropna()
                rows.append({
                    'axis': axis,
                    'x': labels[axis],
                    'series': series,
                    'metric': metric,
                    'mean': values.mean() if len(values) else float('nan'),
                    'stddev': values.std(ddof=0) if len(values) else float('nan'),
                })
    return pd.DataFrame(rows)


LMP_LEVELS = tuple(round(k / 10, 1) for k in range(1, 10))
VC_LEVELS = tuple(round(k / 10, 1) for k in range(1, 12))
FIXED_INTERVALS = (15, 20, 30, 40, 50, 60, 120, 240, 'variable')


def _simulated_site(base: ScenarioConfig, **overrides: Any) -> ScenarioConfig:
    """The synthetic 400 m, over-saturated site with n = 8."""
    settings = {'approach_length_m': 400.0, 'vc_ratio': 1.1, 'n_sample': 8}
    settings.update(overrides)
    return with_overrides(base, **settings)


PRESETS: Dict[str, Callable[[ScenarioConfig], SweepSpec]] = {
    'table2': lambda base: SweepSpec('sample_size', tuple(range(1, 11)), base, (('lmp', (0.1, 0.5, 0.8)),)),
    'table3': lambda base: SweepSpec('fixed_dt', FIXED_INTERVALS, base, (('lmp', (0.2, 0.5, 0.8)),)),
    'table4': lambda base: SweepSpec('lmp', LMP_LEVELS, base),
    'table5': lambda base: SweepSpec('lmp', LMP_LEVELS, base),
    'table6': lambda base: SweepSpec(
        'detector_location', ('none', 'entrance', 'middle', 'exit'), base, (('lmp', LMP_LEVELS),)
    ),
    'table7': lambda base: SweepSpec(
        'approach_length', (74, 150, 200, 300, 400),
        with_overrides(base, n_sample=8), (('lmp', (0.2, 0.5, 0.8)),)
    ),
    'table8': lambda base: SweepSpec(
        'vc_ratio', VC_LEVELS, _simulated_site(base), (('lmp', LMP_LEVELS),)
    ),
    'table9': lambda base: SweepSpec('lmp', LMP_LEVELS, _simulated_site(base)),
    'table10': lambda base: SweepSpec(
        'detector_location', ('none', 'entrance', 'middle', 'exit'), _simulated_site(base),
        (('vc_ratio', (0.2, 0.5, 1.1)), ('lmp', LMP_LEVELS)),
    ),
    'fig4': lambda base: SweepSpec('sample_size', tuple(range(1, 11)), base, (('lmp', LMP_LEVELS),)),
}


def preset(name: str, base: Optional[ScenarioConfig] = None) -> SweepSpec:
    if name not in PRESETS:
        raise ConfigurationError(f"unknown sweep preset {name!r}; choose from {', '.join(PRESETS)}")
    return PRESETS[name](base if base is not None else ScenarioConfig())


def load_sweep_spec(path: str) -> SweepSpec:
    """Read a sweep spec YAML: axis, values, extra_axes, base_config, overrides, preset."""
    values = read_yaml_mapping(path)
    allowed = {'axis', 'values', 'extra_axes', 'base_config', 'overrides', 'preset'}
    unknown = sorted(set(values) - allowed)
    if unknown:
        raise ConfigurationError(f"{path}: unknown sweep keys: {', '.join(unknown)}")

    base = load_scenario(values.get('base_config'))
    overrides = values.get('overrides') or {}
    if not isinstance(overrides, dict):
        raise ConfigurationError(f"{path}: overrides must be a mapping")
    base = with_overrides(base, **overrides)

    if 'preset' in values:
        return preset(str(values['preset']), base)

    if 'axis' not in values or 'values' not in values:
        raise ConfigurationError(f"{path}: a sweep needs 'axis' and 'values' (or a 'preset')")
    extra = values.get('extra_axes') or {}
    if not isinstance(extra, dict):
        raise ConfigurationError(f"{path}: extra_axes must map axis names to value lists")
    return SweepSpec(
        axis=str(values['axis']),
        values=tuple(values['values']),
        base_scenario=base,
        extra_axes=tuple((str(k), tuple(v)) for k, v in extra.items()),
    )
