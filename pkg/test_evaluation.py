#!/usr/bin/env python3
"""
Tests for scoring, single runs and sweeps
"""

import sys
import os
import math
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

import numpy as np
import pandas as pd
import pytest

from services.approach_sim import simulate
from services.exceptions import ConfigurationError, DataError, NoProbesError
from services.evaluation import (
    AXES,
    PRESETS,
    SweepSpec,
    aggregate,
    apply_axis,
    estimate_log,
    load_sweep_spec,
    plot_data,
    preset,
    run_scenario,
    score,
    sweep,
    trend_correlation,
)
from services.interval_scheduler import IntervalMode
from services.kalman_core import StepRecord
from services.probe_sampler import tag
from utils.config_loader import ScenarioConfig, with_overrides


def _records(estimates, truth):
    return [
        StepRecord(
            step=k + 1, interval_end_s=float(k + 1), dt_s=1.0, a_p=1, d_p=1, rho_used=0.5,
            h=1.0, tt_measured=1.0, tt_prior=1.0, n_prior=est, gain=0.1,
            n_post=est, p_post=1.0, n_true=true,
        )
        for k, (est, true) in enumerate(zip(estimates, truth))
    ]


SMALL = with_overrides(ScenarioConfig(), duration_s=1800.0, replications=3)


def test_perfect_estimates_score_zero():
    result = score(_records([4.0, 9.0, 2.0], [4, 9, 2]))
    assert (result.rrmse_pct, result.rmse_veh) == (0.0, 0.0)


def test_score_worked_example():
    result = score(_records([7.0, 10.0], [5, 10]))
    assert result.rmse_veh == pytest.approx(math.sqrt(2.0))
    assert result.rrmse_pct == pytest.approx(100.0 * math.sqrt(8.0) / 15.0)
    assert result.rrmse_pct == pytest.approx(18.856, abs=1e-3)


def test_undefined_estimate_poisons_the_score():
    result = score(_records([7.0, float('nan'), 3.0], [5, 10, 3]))
    assert math.isnan(result.rrmse_pct)
    assert math.isnan(result.rmse_veh)
    assert result.undefined_steps == 1


def test_all_zero_truth_leaves_rmse_defined():
    result = score(_records([1.0, 0.0], [0, 0]))
    assert math.isnan(result.rrmse_pct)
    assert result.rmse_veh == pytest.approx(math.sqrt(0.5))


def test_score_needs_truth_and_steps():
    with pytest.raises(DataError):
        score([])
    with pytest.raises(DataError):
        score(_records([1.0], [None]))


def test_rrmse_rmse_identity_property():
    rng = np.random.default_rng(31)
    for _ in range(1000):
        size = int(rng.integers(1, 60))
        truth = rng.integers(0, 40, size)
        if truth.sum() == 0:
            truth[0] = 1
        estimates = truth + rng.normal(0.0, rng.uniform(0.1, 10.0), size)
        result = score(_records(estimates.tolist(), truth.tolist()))
        expected = 100.0 * result.rmse_veh / float(np.mean(truth))
        assert result.rrmse_pct == pytest.approx(expected, rel=1e-9)


def test_run_scenario_is_deterministic():
    first = run_scenario(SMALL, replication=1)
    second = run_scenario(SMALL, replication=1)
    assert first.step_records == second.step_records
    assert first.rrmse_pct == second.rrmse_pct
    assert first.is_defined


def test_run_result_summary_fields():
    result = run_scenario(SMALL)
    assert result.n_steps == len(result.step_records)
    assert result.undefined_steps == 0
    assert result.max_dt_s >= result.mean_dt_s > 0
    assert 0.0 < result.realized_lmp <= 1.0
    dts = [r.dt_s for r in result.step_records]
    assert result.mean_dt_s == pytest.approx(np.mean(dts))


def test_full_information_with_known_start_is_exact():
    scenario = with_overrides(SMALL, lmp=1.0, rho_min=1.0, n0=0.0, p0=0.0)
    result = run_scenario(scenario)
    assert result.rmse_veh == 0.0
    assert result.rrmse_pct == 0.0


def test_full_penetration_state_equation_tracks_true_changes():
    scenario = with_overrides(SMALL, lmp=1.0, rho_min=1.0, clamp_nonnegative=False)
    records = run_scenario(scenario).step_records
    truth = [0] + [r.n_true for r in records]
    for k, record in enumerate(records):
        assert record.a_p - record.d_p == truth[k + 1] - truth[k]


def test_vanishing_penetration_raises_no_probes():
    with pytest.raises(NoProbesError):
        run_scenario(with_overrides(SMALL, lmp=1e-9))


def test_estimate_log_uses_recorded_tags():
    log = simulate(SMALL.geometry, SMALL.signal, SMALL.demand)
    tagged = tag(log, SMALL.sampling.lmp, SMALL.sampling.seed_for(0))
    from_tags = estimate_log(tagged, SMALL, t_end=SMALL.demand.duration_s)
    retagged = estimate_log(log, SMALL, seed=SMALL.sampling.seed_for(0), t_end=SMALL.demand.duration_s)
    assert from_tags.step_records == retagged.step_records


def test_fixed_interval_runs_record_undefined_steps():
    scenario = with_overrides(SMALL, interval_mode='fixed', fixed_dt_s=20.0)
    result = run_scenario(scenario)
    assert result.undefined_steps > 0
    assert not result.is_defined


def test_apply_axis_mappings():
    assert apply_axis(SMALL, 'fixed_dt', 'variable').schedule.mode is IntervalMode.VARIABLE
    fixed = apply_axis(SMALL, 'fixed_dt', 30)
    assert fixed.schedule.mode is IntervalMode.FIXED and fixed.schedule.fixed_dt == 30.0
    assert apply_axis(SMALL, 'vc_ratio', 0.5).demand.arrival_rate_vph == pytest.approx(427.5)
    assert apply_axis(SMALL, 'lmp', 0.7).filter.rho_fixed == 0.7
    with pytest.raises(ConfigurationError):
        apply_axis(SMALL, 'green_split', 0.5)


def test_sweep_spec_validates_values():
    with pytest.raises(ConfigurationError):
        SweepSpec('lmp', (), SMALL)
    with pytest.raises(ConfigurationError):
        SweepSpec('lmp', (0.2, 1.5), SMALL)
    with pytest.raises(ConfigurationError):
        SweepSpec('lmp', (0.2,), SMALL, (('lmp', (0.3,)),))


def test_sweep_shape_and_order():
    spec = SweepSpec('lmp', (0.3, 0.6), with_overrides(SMALL, replications=2), (('sample_size', (3, 5)),))
    result = sweep(spec)
    assert len(result.results) == 2 * 2 * 2
    assert list(result.results['lmp']) == [0.3] * 4 + [0.6] * 4
    assert list(result.results['replication']) == [0, 1] * 4
    assert len(result.aggregates) == 4
    assert (result.results['error'] == '').all()
    assert result.metadata['rng_algorithm'] == 'numpy.random.PCG64'


def test_sweep_records_failures_without_aborting():
    spec = SweepSpec('lmp', (1e-9, 0.5), with_overrides(SMALL, replications=2))
    result = sweep(spec)
    failed = result.results[result.results['lmp'] == 1e-9]
    assert failed['error'].str.startswith('NoProbesError').all()
    healthy = result.aggregates[result.aggregates['lmp'] == 0.5].iloc[0]
    assert healthy['defined_runs'] == 2
    assert not math.isnan(healthy['mean_rrmse_pct'])
    broken = result.aggregates[result.aggregates['lmp'] == 1e-9].iloc[0]
    assert broken['failed_runs'] == 2
    assert math.isnan(broken['mean_rrmse_pct'])


def test_sweep_with_workers_matches_serial():
    spec = SweepSpec('sample_size', (2, 4), with_overrides(SMALL, replications=2))
    serial = sweep(spec, workers=1).results
    parallel = sweep(spec, workers=2).results
    pd.testing.assert_frame_equal(serial, parallel)


def _fake_results():
    return pd.DataFrame({
        'lmp': [0.1, 0.1, 0.5, 0.5],
        'replication': [0, 1, 0, 1],
        'rrmse_pct': [40.0, 30.0, 20.0, float('nan')],
        'rmse_veh': [2.0, 1.5, 1.0, float('nan')],
        'n_steps': [10, 10, 20, 20],
        'undefined_steps': [0, 0, 0, 3],
        'mean_dt_s': [50.0, 60.0, 12.0, 14.0],
        'max_dt_s': [80.0, 90.0, 20.0, 30.0],
        'realized_lmp': [0.1, 0.12, 0.5, 0.48],
        'sse': [40.0, 22.5, 20.0, float('nan')],
        'sum_true': [50.0, 50.0, 100.0, 100.0],
        'error': ['', '', '', ''],
    })


def test_aggregate_statistics():
    agg = aggregate(_fake_results(), ['lmp']).set_index('lmp')
    assert agg.loc[0.1, 'mean_rrmse_pct'] == pytest.approx(35.0)
    assert agg.loc[0.1, 'std_rrmse_pct'] == pytest.approx(5.0)
    assert agg.loc[0.1, 'pooled_rmse_veh'] == pytest.approx(math.sqrt(62.5 / 20))
    assert agg.loc[0.1, 'pooled_rrmse_pct'] == pytest.approx(100 * math.sqrt(20 * 62.5) / 100.0)
    assert agg.loc[0.1, 'max_dt_s'] == 90.0
    assert math.isnan(agg.loc[0.5, 'mean_rrmse_pct'])
    assert agg.loc[0.5, 'defined_mean_rrmse_pct'] == pytest.approx(20.0)
    assert agg.loc[0.5, 'undefined_runs'] == 1


def test_aggregate_is_permutation_invariant():
    results = _fake_results()
    shuffled = results.sample(frac=1.0, random_state=4)
    a = aggregate(results, ['lmp']).set_index('lmp').sort_index()
    b = aggregate(shuffled, ['lmp']).set_index('lmp').sort_index()
    pd.testing.assert_frame_equal(a, b)


def test_trend_correlation():
    agg = pd.DataFrame({'lmp': [0.1, 0.2, 0.3, 0.4], 'mean_rrmse_pct': [40.0, 30.0, 31.0, 10.0]})
    assert trend_correlation(agg, 'lmp') == pytest.approx(-0.8)
    assert math.isnan(trend_correlation(agg.head(1), 'lmp'))


def test_plot_data_long_form():
    rows = plot_data(_fake_results(), ['lmp'])
    assert list(rows.columns) == ['axis', 'x', 'series', 'metric', 'mean', 'stddev']
    dt = rows[(rows['metric'] == 'mean_dt_s') & (rows['x'] == 0.1)].iloc[0]
    assert dt['mean'] == pytest.approx(55.0)
    assert dt['series'] == 'all'


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_presets_build(name):
    spec = preset(name)
    assert set(spec.axis_names) <= set(AXES)
    assert len(spec.cells()) >= 9


def test_fixed_interval_preset_grid():
    spec = preset('table3')
    assert spec.values == (15, 20, 30, 40, 50, 60, 120, 240, 'variable')


def test_congestion_preset_grid():
    spec = preset('table8')
    assert len(spec.cells()) == 11 * 9
    assert spec.base_scenario.geometry.length_m == 400.0


def test_load_sweep_spec(tmp_path):
    path = tmp_path / "sweep.yaml"
    path.write_text(
        "axis: lmp\n"
        "values: [0.2, 0.4]\n"
        "extra_axes:\n"
        "  detector_location: [none, exit]\n"
        "overrides:\n"
        "  replications: 4\n"
    )
    spec = load_sweep_spec(str(path))
    assert spec.axis_names == ['lmp', 'detector_location']
    assert len(spec.cells()) == 4
    assert spec.base_scenario.sampling.replications == 4


def test_load_sweep_spec_rejects_unknown_keys(tmp_path):
    path = tmp_path / "sweep.yaml"
    path.write_text("axis: lmp\nvalues: [0.2]\nrepeats: 3\n")
    with pytest.raises(ConfigurationError):
        load_sweep_spec(str(path))
