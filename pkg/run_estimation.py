#!/usr/bin/env python3
"""
Probe Vehicle Count Estimation Launcher
Simulates signalized-approach event logs, estimates vehicle counts from probe
data with the Kalman filter, and runs Monte Carlo sensitivity sweeps.
"""

import os
import sys
import logging
import argparse
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

from dotenv import load_dotenv

from services.approach_sim import capacity, simulate
from services.evaluation import (
    PRESETS,
    estimate_log,
    load_sweep_spec,
    plot_data,
    preset,
    sweep,
)
from services.exceptions import (
    ConfigurationError,
    DataError,
    DegenerateFilter,
    EstimationError,
    NoProbesError,
)
from services.probe_sampler import tag
from utils.config_loader import DEFAULT_CONFIG_PATH, ScenarioConfig, config_hash, load_scenario, with_overrides
from utils.data_loader import read_event_log, write_event_log, write_step_records, write_table

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_ESTIMATION = 4

LOG_LEVEL_ENV = "PROBE_COUNT_LOG_LEVEL"


def setup_logging(level: str, log_file: Optional[str]):
    """Console logging plus an optional log file, as for every launcher run."""
    handlers: List[logging.Handler] = [logging.StreamHandler()]
    if log_file:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_file))
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=handlers,
        force=True,
    )


class EstimationLauncher:
    """Runs one command against a loaded scenario."""

    def __init__(self, config_path: Optional[str] = None):
        self.config_path = config_path
        self.scenario = self.load_config()

    def load_config(self) -> ScenarioConfig:
        path = self.config_path
        if path is None and os.path.exists(DEFAULT_CONFIG_PATH):
            path = DEFAULT_CONFIG_PATH
        if path is None:
            logger.info("No configuration file found, using built-in defaults")
        return load_scenario(path)

    def simulate(self, out_path: Optional[str], seed: Optional[int]) -> int:
        scenario = with_overrides(self.scenario, sim_seed=seed)
        log = simulate(scenario.geometry, scenario.signal, scenario.demand)
        # The written log carries the tags of replication 0
        tagged = tag(log, scenario.sampling.lmp, scenario.sampling.seed_for(0), scenario.sampling.method)
        out_path = out_path or scenario.event_log_path
        write_event_log(tagged, out_path)

        exited = sum(1 for v in tagged if v.t_exit is not None)
        probes = sum(1 for v in tagged if v.is_probe)
        cap = capacity(scenario.geometry, scenario.signal, scenario.demand)
        print(f"Simulated {len(tagged)} vehicles over {scenario.demand.duration_s / 60:.1f} min "
              f"({exited} reached the stop bar, {probes} probes)")
        print(f"Demand {scenario.demand.arrival_rate_vph:.0f} veh/h, capacity {cap:.0f} veh/h")
        print(f"Event log written to {out_path}")
        return EXIT_OK

    def estimate(self, args: argparse.Namespace) -> int:
        scenario = with_overrides(
            self.scenario,
            interval_mode=args.mode,
            n_sample=args.n_sample,
            fixed_dt_s=args.fixed_dt,
            lmp=args.lmp,
            rho_min=args.rho_min,
            detector=args.detector,
            missing_policy=args.missing_policy,
        )
        log_path = args.event_log or scenario.event_log_path
        log = read_event_log(log_path)

        # Re-tag only when asked to; otherwise trust the recorded is_probe flags
        seed = args.seed
        if seed is None and args.lmp is not None:
            seed = scenario.sampling.seed_for(0)
        result = estimate_log(log, scenario, seed=seed)

        out_path = args.out or scenario.results_path
        write_step_records(result.step_records, out_path)

        logger.info(f"RRMSE {result.rrmse_pct:.2f}%, RMSE {result.rmse_veh:.3f} veh over {result.n_steps} steps")
        print(f"Steps: {result.n_steps} (undefined: {result.undefined_steps})")
        print(f"Mean interval: {result.mean_dt_s:.1f} s (max {result.max_dt_s:.1f} s)")
        print(f"RRMSE: {result.rrmse_pct:.2f}%  RMSE: {result.rmse_veh:.3f} veh")
        print(f"Step records written to {out_path}")
        return EXIT_OK

    def sweep(self, args: argparse.Namespace) -> int:
        if args.spec:
            spec = load_sweep_spec(args.spec)
        else:
            spec = preset(args.preset, self.scenario)
        if args.replications is not None:
            spec = replace(spec, base_scenario=with_overrides(spec.base_scenario, replications=args.replications))

        result = sweep(spec, workers=args.workers, progress=args.progress)
        results_path = args.out or spec.base_scenario.results_path
        aggregates_path = args.aggregates or spec.base_scenario.aggregates_path
        write_table(result.results, results_path, result.metadata)
        write_table(result.aggregates, aggregates_path, result.metadata)
        if args.emit_plot_data:
            write_table(plot_data(result.results, spec.axis_names), args.emit_plot_data, result.metadata)

        failed = int((result.results['error'] != '').sum())
        print(f"Sweep over {', '.join(spec.axis_names)}: {len(result.results)} runs "
              f"({failed} failed), config {config_hash(spec.base_scenario)[:12]}")
        print(f"Results written to {results_path}")
        print(f"Aggregates written to {aggregates_path}")
        return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description='Probe Vehicle Count Estimation', allow_abbrev=False)
    parser.add_argument('--config', default=None,
                        help=f'Scenario file path (default: {DEFAULT_CONFIG_PATH} if present)')
    parser.add_argument('--log-level', default=None,
                        help=f'Logging level (default: ${LOG_LEVEL_ENV} or INFO)')
    parser.add_argument('--log-file', default='logs/estimation.log',
                        help="Log file path; '' disables file logging")
    sub = parser.add_subparsers(dest='command', required=True)

    p_sim = sub.add_parser('simulate', help='Simulate an approach and write the event log')
    p_sim.add_argument('--out', default=None, help='Event-log CSV path')
    p_sim.add_argument('--seed', type=int, default=None, help='Simulation seed')

    p_est = sub.add_parser('estimate', help='Estimate vehicle counts from an event log')
    p_est.add_argument('--event-log', default=None, help='Event-log CSV path')
    p_est.add_argument('--out', default=None, help='Step-records CSV path')
    p_est.add_argument('--mode', choices=['variable', 'fixed'], default=None)
    p_est.add_argument('--n-sample', type=int, default=None, help='Probes per variable interval')
    p_est.add_argument('--fixed-dt', type=float, default=None, help='Fixed interval length (s)')
    p_est.add_argument('--lmp', type=float, default=None, help='Re-tag probes at this penetration')
    p_est.add_argument('--rho-min', type=float, default=None, help='Lower bound on rho in the state equation')
    p_est.add_argument('--detector', choices=['none', 'entrance', 'middle', 'exit'], default=None)
    p_est.add_argument('--missing-policy', choices=['propagate_nan', 'paper_nan', 'predict_only'], default=None)
    p_est.add_argument('--seed', type=int, default=None, help='Re-tag probes with this seed')

    p_swp = sub.add_parser('sweep', help='Run a Monte Carlo sensitivity sweep')
    source = p_swp.add_mutually_exclusive_group(required=True)
    source.add_argument('--spec', default=None, help='Sweep spec YAML path')
    source.add_argument('--preset', choices=sorted(PRESETS), default=None)
    p_swp.add_argument('--out', default=None, help='Long-form results CSV path')
    p_swp.add_argument('--aggregates', default=None, help='Per-cell aggregates CSV path')
    p_swp.add_argument('--replications', type=int, default=None)
    p_swp.add_argument('--workers', type=int, default=1, help='Worker processes')
    p_swp.add_argument('--emit-plot-data', default=None, help='Plot-ready CSV path')
    p_swp.add_argument('--progress', action='store_true', help='Show a progress bar')
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Main function; returns the process exit code."""
    load_dotenv()
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level or os.getenv(LOG_LEVEL_ENV, 'INFO'), args.log_file)

    try:
        launcher = EstimationLauncher(args.config)
        if args.command == 'simulate':
            return launcher.simulate(args.out, args.seed)
        if args.command == 'estimate':
            return launcher.estimate(args)
        return launcher.sweep(args)
    except ConfigurationError as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG
    except (NoProbesError, DegenerateFilter) as e:
        logger.error(f"Estimation failed: {e}")
        return EXIT_ESTIMATION
    except (DataError, OSError) as e:
        logger.error(f"Data error: {e}")
        return EXIT_DATA
    except EstimationError as e:
        logger.error(f"Estimation failed: {e}")
        return EXIT_ESTIMATION


if __name__ == "__main__":
    sys.exit(main())
