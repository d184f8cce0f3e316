#!/usr/bin/env python3
"""
Tests for the run_estimation command-line launcher
"""

import sys
import os
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

import pandas as pd
import pytest

from run_estimation import EXIT_CONFIG, EXIT_DATA, EXIT_ESTIMATION, EXIT_OK, build_parser, main
from utils.data_loader import read_event_log, read_metadata, read_step_records, read_table


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "scenario.yaml").write_text("duration_s: 1800.0\nreplications: 2\n")
    return tmp_path


def run(*args):
    return main(['--log-file', '', '--config', 'scenario.yaml', *args])


def test_simulate_is_byte_identical(workdir):
    assert run('simulate', '--out', 'a.csv') == EXIT_OK
    assert run('simulate', '--out', 'b.csv') == EXIT_OK
    assert (workdir / 'a.csv').read_bytes() == (workdir / 'b.csv').read_bytes()
    assert len(read_event_log('a.csv')) > 0


def test_simulate_seed_override_changes_the_log(workdir):
    run('simulate', '--out', 'a.csv')
    run('simulate', '--out', 'b.csv', '--seed', '7')
    assert (workdir / 'a.csv').read_bytes() != (workdir / 'b.csv').read_bytes()


def test_simulate_summary(workdir, capsys):
    run('simulate', '--out', 'a.csv')
    out = capsys.readouterr().out
    assert "Simulated" in out
    assert "capacity 855 veh/h" in out


def test_zero_demand_writes_header_only(workdir):
    (workdir / "scenario.yaml").write_text("arrival_rate_vph: 0.0\n")
    assert run('simulate', '--out', 'empty.csv') == EXIT_OK
    assert (workdir / 'empty.csv').read_text() == "vehicle_id,t_entry_s,t_exit_s,is_probe\n"


def test_default_config_file_is_used_when_present(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "config").mkdir()
    (tmp_path / "config" / "system_config.yaml").write_text("duration_s: 600.0\n")
    assert main(['--log-file', '', 'simulate', '--out', 'short.csv']) == EXIT_OK
    assert max(v.t_entry for v in read_event_log('short.csv')) < 600.0


def test_estimate_writes_step_records(workdir, capsys):
    run('simulate', '--out', 'events.csv')
    assert run('estimate', '--event-log', 'events.csv', '--out', 'steps.csv') == EXIT_OK
    records = read_step_records('steps.csv')
    assert len(records) > 0
    assert all(r.d_p >= 5 for r in records)
    assert "RRMSE" in capsys.readouterr().out


def test_estimate_options_parse_after_global_log_options():
    args = build_parser().parse_args(['--log-level', 'DEBUG', 'estimate', '--event-log', 'events.csv'])
    assert args.event_log == 'events.csv'
    assert args.log_level == 'DEBUG'
    with pytest.raises(SystemExit):
        build_parser().parse_args(['--log', 'DEBUG', 'simulate'])


WORKED_STEP_LOG = (
    "vehicle_id,t_entry_s,t_exit_s,is_probe\n"
    "0,1.000000,11.000000,1\n"
    "1,2.000000,12.000000,1\n"
    "2,3.000000,13.000000,1\n"
    "3,4.000000,14.000000,1\n"
    "4,5.000000,15.000000,1\n"
    "5,8.000000,30.000000,1\n"
)


@pytest.mark.parametrize("rho_min, n_prior", [("0.5", 7.0), ("0", 15.0)])
def test_estimate_reproduces_the_worked_first_step(workdir, rho_min, n_prior):
    (workdir / "scenario.yaml").write_text(
        "rho_fixed: 0.1\nn0: 5.0\np0: 5.0\nn_sample: 5\nclamp_nonnegative: false\n"
    )
    (workdir / "events.csv").write_text(WORKED_STEP_LOG)
    assert run('estimate', '--event-log', 'events.csv', '--out', 'steps.csv',
               '--rho-min', rho_min) == EXIT_OK

    records = read_step_records('steps.csv')
    assert len(records) == 1
    first = records[0]
    assert (first.a_p, first.d_p) == (6, 5)
    assert first.rho_used == pytest.approx(0.1)
    assert first.tt_measured == pytest.approx(10.0)
    assert first.n_prior == pytest.approx(n_prior)
    assert first.n_true == 1


def test_estimate_accepts_alternative_missing_policy_spelling(workdir):
    (workdir / "events.csv").write_text(WORKED_STEP_LOG)
    assert run('estimate', '--event-log', 'events.csv', '--out', 'steps.csv',
               '--missing-policy', 'paper_nan') == EXIT_OK


def test_estimate_overrides(workdir):
    run('simulate', '--out', 'events.csv')
    assert run('estimate', '--event-log', 'events.csv', '--out', 'steps.csv',
               '--lmp', '1.0', '--rho-min', '1.0', '--n-sample', '3') == EXIT_OK
    records = read_step_records('steps.csv')
    assert all(r.rho_used == 1.0 for r in records)
    assert all(r.d_p >= 3 for r in records)
    previous = 5.0
    for r in records:
        if r.n_prior > 0:
            assert r.n_prior == pytest.approx(previous + r.a_p - r.d_p)
        previous = r.n_post


def test_estimate_fixed_mode_reports_undefined_steps(workdir, capsys):
    run('simulate', '--out', 'events.csv')
    assert run('estimate', '--event-log', 'events.csv', '--out', 'steps.csv',
               '--mode', 'fixed', '--fixed-dt', '20') == EXIT_OK
    steps = pd.read_csv('steps.csv')
    assert steps['n_post'].isna().any()
    assert "undefined" in capsys.readouterr().out


def test_estimate_without_probes_exits_with_estimation_code(workdir):
    (workdir / "events.csv").write_text(
        "vehicle_id,t_entry_s,t_exit_s,is_probe\n0,1.0,8.0,0\n1,3.0,10.0,0\n"
    )
    assert run('estimate', '--event-log', 'events.csv', '--out', 'steps.csv') == EXIT_ESTIMATION


def test_missing_event_log_is_a_data_error(workdir):
    assert run('estimate', '--event-log', 'nowhere.csv') == EXIT_DATA


def test_malformed_event_log_is_a_data_error(workdir):
    (workdir / "events.csv").write_text("vehicle_id,t_entry_s,t_exit_s,is_probe\n0,9.0,2.0,1\n")
    assert run('estimate', '--event-log', 'events.csv') == EXIT_DATA


def test_bad_config_exits_with_config_code(workdir):
    (workdir / "scenario.yaml").write_text("lmp: 0.2\nsignal_plan: actuated\n")
    assert run('simulate', '--out', 'a.csv') == EXIT_CONFIG


def test_invalid_override_exits_with_config_code(workdir):
    run('simulate', '--out', 'events.csv')
    assert run('estimate', '--event-log', 'events.csv', '--n-sample', '0') == EXIT_CONFIG


def test_sweep_from_spec_file(workdir):
    (workdir / "sweep.yaml").write_text(
        "axis: lmp\n"
        "values: [0.3, 0.6]\n"
        "base_config: scenario.yaml\n"
        "overrides:\n"
        "  replications: 2\n"
    )
    assert run('sweep', '--spec', 'sweep.yaml', '--out', 'results.csv',
               '--aggregates', 'agg.csv', '--emit-plot-data', 'plot.csv') == EXIT_OK

    results = read_table('results.csv')
    assert len(results) == 4
    assert {'lmp', 'replication', 'seed', 'rrmse_pct', 'rmse_veh', 'error'} <= set(results.columns)
    assert list(results['seed']) == [1000, 1001, 1000, 1001]

    meta = read_metadata('results.csv')
    assert meta['rng_algorithm'] == 'numpy.random.PCG64'
    assert len(meta['config_sha256']) == 64

    assert len(read_table('agg.csv')) == 2
    plot = read_table('plot.csv')
    assert set(plot['metric']) == {'rrmse_pct', 'rmse_veh', 'mean_dt_s'}


def test_sweep_preset_with_replication_override(workdir):
    assert run('sweep', '--preset', 'table4', '--replications', '1',
               '--out', 'results.csv', '--aggregates', 'agg.csv') == EXIT_OK
    results = read_table('results.csv')
    assert len(results) == 9
    assert sorted(results['lmp']) == pytest.approx([0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9])


def test_sweep_spec_with_unknown_axis(workdir):
    (workdir / "sweep.yaml").write_text("axis: weather\nvalues: [1, 2]\n")
    assert run('sweep', '--spec', 'sweep.yaml') == EXIT_CONFIG


def test_log_level_from_environment(workdir, monkeypatch):
    monkeypatch.setenv('PROBE_COUNT_LOG_LEVEL', 'DEBUG')
    assert run('simulate', '--out', 'a.csv') == EXIT_OK
