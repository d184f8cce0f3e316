"""
Data Loader
Reads and writes the event-log, step-record and sweep-result CSV files.
"""

import math
import logging
from dataclasses import asdict
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import pandas as pd

from services.exceptions import DataError
from services.interval_scheduler import VehicleRecord
from services.kalman_core import StepRecord

logger = logging.getLogger(__name__)

EVENT_LOG_COLUMNS = ['vehicle_id', 't_entry_s', 't_exit_s', 'is_probe']
STEP_RECORD_COLUMNS = [
    'step', 'interval_end_s', 'dt_s', 'a_p', 'd_p', 'rho_used', 'h', 'tt_measured',
    'tt_prior', 'n_prior', 'gain', 'n_post', 'p_post', 'n_true',
]


def _prepare(path: str):
    Path(path).parent.mkdir(parents=True, exist_ok=True)


def write_event_log(records: Sequence[VehicleRecord], path: str):
    """Write an event log: 6 fractional digits, empty t_exit_s when absent, LF endings."""
    _prepare(path)
    rows = [
        {
            'vehicle_id': v.vehicle_id,
            't_entry_s': f"{v.t_entry:.6f}",
            't_exit_s': f"{v.t_exit:.6f}" if v.t_exit is not None else '',
            'is_probe': 1 if v.is_probe else 0,
        }
        for v in records
    ]
    df = pd.DataFrame(rows, columns=EVENT_LOG_COLUMNS)
    with open(path, 'w', encoding='utf-8', newline='') as f:
        df.to_csv(f, index=False, lineterminator='\n')
    logger.info(f"Wrote {len(records)} vehicle records to {path}")


def _row_error(path: str, index: int, message: str) -> DataError:
    # Header is line 1, first data row is line 2
    return DataError(f"{path}:{index + 2}: {message}")


def read_event_log(path: str) -> List[VehicleRecord]:
    """Read and validate an event log written by write_event_log (or by hand)."""
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False, encoding='utf-8')
    except (pd.errors.ParserError, UnicodeDecodeError) as e:
        raise DataError(f"{path}: cannot parse CSV ({e})")
    except pd.errors.EmptyDataError:
        raise DataError(f"{path}: file is empty (a header line is required)")

    missing = [c for c in EVENT_LOG_COLUMNS if c not in df.columns]
    if missing:
        raise DataError(f"{path}:1: missing columns {', '.join(missing)}")

    records = []
    seen = set()
    for i, row in enumerate(df.itertuples(index=False)):
        try:
            vehicle_id = int(row.vehicle_id)
            t_entry = float(row.t_entry_s)
            t_exit = float(row.t_exit_s) if row.t_exit_s.strip() != '' else None
        except ValueError as e:
            raise _row_error(path, i, f"bad value ({e})")
        flag = row.is_probe.strip().lower()
        if flag not in ('0', '1', 'true', 'false'):
            raise _row_error(path, i, f"is_probe must be 0/1, got {row.is_probe!r}")
        if vehicle_id in seen:
            raise _row_error(path, i, f"duplicate vehicle_id {vehicle_id}")
        if not math.isfinite(t_entry) or (t_exit is not None and not math.isfinite(t_exit)):
            raise _row_error(path, i, "times must be finite")
        if t_exit is not None and not t_exit > t_entry:
            raise _row_error(path, i, f"t_exit_s {t_exit} is not after t_entry_s {t_entry}")
        seen.add(vehicle_id)
        records.append(VehicleRecord(vehicle_id, t_entry, t_exit, flag in ('1', 'true')))

    logger.info(f"Read {len(records)} vehicle records from {path}")
    return records


def step_records_frame(records: Sequence[StepRecord]) -> pd.DataFrame:
    return pd.DataFrame([asdict(r) for r in records], columns=STEP_RECORD_COLUMNS)


def write_step_records(records: Sequence[StepRecord], path: str):
    _prepare(path)
    with open(path, 'w', encoding='utf-8', newline='') as f:
        step_records_frame(records).to_csv(f, index=False, lineterminator='\n')
    logger.info(f"Wrote {len(records)} step records to {path}")


def _optional(value: Any, kind=float) -> Optional[Any]:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return None
    return kind(value)


def read_step_records(path: str) -> List[StepRecord]:
    df = pd.read_csv(path, float_precision='round_trip')
    missing = [c for c in STEP_RECORD_COLUMNS if c not in df.columns]
    if missing:
        raise DataError(f"{path}:1: missing columns {', '.join(missing)}")
    records = []
    for row in df.to_dict('records'):
        records.append(StepRecord(
            step=int(row['step']),
            interval_end_s=_optional(row['interval_end_s']),
            dt_s=float(row['dt_s']),
            a_p=int(row['a_p']),
            d_p=int(row['d_p']),
            rho_used=float(row['rho_used']),
            h=_optional(row['h']),
            tt_measured=_optional(row['tt_measured']),
            tt_prior=_optional(row['tt_prior']),
            n_prior=float(row['n_prior']),
            gain=_optional(row['gain']),
            n_post=float(row['n_post']),
            p_post=float(row['p_post']),
            n_true=_optional(row['n_true']),
        ))
    return records


def write_table(df: pd.DataFrame, path: str, metadata: Optional[Dict[str, Any]] = None):
    """Write a results table preceded by '# key: value' metadata lines."""
    _prepare(path)
    with open(path, 'w', encoding='utf-8', newline='') as f:
        for key, value in (metadata or {}).items():
            f.write(f"# {key}: {value}\n")
        df.to_csv(f, index=False, lineterminator='\n')
    logger.info(f"Wrote {len(df)} rows to {path}")


def read_table(path: str) -> pd.DataFrame:
    return pd.read_csv(path, comment='#', float_precision='round_trip')


def read_metadata(path: str) -> Dict[str, str]:
    metadata = {}
    with open(path, 'r', encoding='utf-8') as f:
        for line in f:
            if not line.startswith('# '):
                break
            key, _, value = line[2:].rstrip('\n').partition(': ')
            metadata[key] = value
    return metadata
