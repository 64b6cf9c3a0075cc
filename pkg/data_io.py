# data_io.py - Histogram, event, result and run-manifest files
"""
Plain-text file formats.

Histogram files carry "# key = value" header lines (bin_width_ps, origin_ps,
exposure_s, count_type, meta.*) followed by a "bin_start_ps,count" table.
Event files carry the frame and period in the header followed by a
"cycle,pulse,raw_time_ps[,kind]" table; dropping the kind column blinds the
stream. Numbers are written so that reading them back is lossless.
"""

import json
import logging
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np
import pandas as pd

from analysis import LifetimeResult, TimeHistogram
from config import config as app_config
from errors import FileFormatError
from physics_sim import KIND_NAMES, EventTable, ExperimentConfig

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

HISTOGRAM_COLUMNS = ['bin_start_ps', 'count']
EVENT_COLUMNS = ['cycle', 'pulse', 'raw_time_ps', 'kind']


def format_number(value) -> str:
    """Shortest lossless text for a number; integral floats drop the fraction."""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    value = float(value)
    if value.is_integer() and abs(value) < 1e15:
        return str(int(value))
    return repr(value)


def _format_column(values: np.ndarray) -> List[str]:
    if values.dtype.kind in 'iu':
        return [str(v) for v in values.tolist()]
    if np.all(np.mod(values, 1.0) == 0) and np.all(np.abs(values) < 1e15):
        return [str(v) for v in values.astype(np.int64).tolist()]
    return [repr(v) for v in values.tolist()]


class TableFileReader:
    """Reads "# key = value" headers followed by a CSV table, tracking line numbers."""

    def __init__(self, path: PathLike):
        self.path = Path(path)
        self.header: Dict[str, str] = {}
        self.header_lines = 0
        self.column_line = 0
        self.columns: List[str] = []
        self.row_count = 0

    def read_header(self) -> Dict[str, str]:
        if not self.path.exists():
            raise FileNotFoundError(f"No such file: {self.path}")
        with open(self.path, 'r', encoding='utf-8') as handle:
            for line_num, line in enumerate(handle, 1):
                stripped = line.strip()
                if not stripped:
                    continue
                if stripped.startswith('#'):
                    body = stripped[1:].strip()
                    if '=' not in body:
                        continue
                    key, value = (part.strip() for part in body.split('=', 1))
                    if key in self.header:
                        raise FileFormatError(f"duplicate header key '{key}'", str(self.path), line_num)
                    self.header[key] = value
                    self.header_lines = line_num
                    continue
                self.columns = [c.strip() for c in stripped.split(',')]
                self.column_line = line_num
                break
        if not self.column_line:
            raise FileFormatError("missing column header row", str(self.path))
        logger.debug(f"{self.path}: {len(self.header)} header entries, columns {self.columns}")
        return self.header

    def header_float(self, key: str, default: Optional[float] = None) -> float:
        if key not in self.header:
            if default is not None:
                return default
            raise FileFormatError(f"missing header entry '{key}'", str(self.path))
        try:
            return float(self.header[key])
        except ValueError:
            raise FileFormatError(f"header entry '{key}' is not a number: {self.header[key]!r}",
                                  str(self.path))

    def read_table(self, dtypes: Dict[str, Any]) -> pd.DataFrame:
        """Fast pandas read; on failure rescans line by line to report the offending line."""
        try:
            frame = pd.read_csv(self.path, skiprows=self.column_line, header=None, names=self.columns,
                                dtype=dtypes, comment='#', skip_blank_lines=True)
        except pd.errors.EmptyDataError:
            frame = pd.DataFrame({name: pd.Series(dtype=dtypes.get(name, object)) for name in self.columns})
        except (ValueError, pd.errors.ParserError) as error:
            self._locate_bad_row(dtypes)
            raise FileFormatError(f"unreadable table: {error}", str(self.path))
        self.row_count = len(frame)
        return frame

    def row_line(self, row_index: int) -> int:
        """File line number of a table row (no blank lines inside the table)."""
        return self.column_line + 1 + row_index

    def _locate_bad_row(self, dtypes: Dict[str, Any]):
        with open(self.path, 'r', encoding='utf-8') as handle:
            for line_num, line in enumerate(handle, 1):
                if line_num <= self.column_line or not line.strip() or line.lstrip().startswith('#'):
                    continue
                fields = [f.strip() for f in line.strip().split(',')]
                if len(fields) != len(self.columns):
                    raise FileFormatError(f"expected {len(self.columns)} fields, found {len(fields)}",
                                          str(self.path), line_num)
                for name, text in zip(self.columns, fields):
                    kind = dtypes.get(name)
                    try:
                        if kind in (np.int64, 'int64'):
                            int(text)
                        elif kind in (float, 'float64'):
                            float(text)
                    except ValueError:
                        raise FileFormatError(f"invalid {name} value {text!r}", str(self.path), line_num)

    def get_processing_stats(self) -> Dict[str, Any]:
        return {
            'path': str(self.path),
            'header_entries': len(self.header),
            'columns': list(self.columns),
            'rows': self.row_count,
        }


# =============================================================================
# Histograms
# =============================================================================

def write_histogram(path: PathLike, hist: TimeHistogram) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [
        f"# bin_width_ps = {format_number(hist.bin_width_ps)}",
        f"# origin_ps = {format_number(hist.origin_ps)}",
        f"# exposure_s = {format_number(hist.exposure_s)}",
        f"# count_type = {'int' if hist.is_integral else 'float'}",
    ]
    lines.extend(f"# meta.{key} = {value}" for key, value in sorted(hist.metadata.items()))
    lines.append(','.join(HISTOGRAM_COLUMNS))
    starts = _format_column(hist.bin_starts_ps)
    counts = _format_column(hist.counts)
    body = '\n'.join([f"{s},{c}" for s, c in zip(starts, counts)])
    with open(path, 'w', encoding='utf-8', newline='\n') as handle:
        handle.write('\n'.join(lines) + '\n')
        if body:
            handle.write(body + '\n')
    logger.debug(f"Wrote {hist.n_bins}-bin histogram to {path}")
    return path


def read_histogram(path: PathLike) -> TimeHistogram:
    reader = TableFileReader(path)
    header = reader.read_header()
    if reader.columns != HISTOGRAM_COLUMNS:
        raise FileFormatError(f"expected columns {HISTOGRAM_COLUMNS}, found {reader.columns}",
                              str(reader.path), reader.column_line)
    bin_width = reader.header_float('bin_width_ps')
    origin = reader.header_float('origin_ps', 0.0)
    exposure = reader.header_float('exposure_s', 0.0)
    count_type = header.get('count_type', 'int')
    if count_type not in ('int', 'float'):
        raise FileFormatError(f"unknown count_type {count_type!r}", str(reader.path))
    if not bin_width > 0:
        raise FileFormatError(f"bin width must be positive, got {bin_width}", str(reader.path))

    frame = reader.read_table({'bin_start_ps': float,
                               'count': np.int64 if count_type == 'int' else float})
    counts = frame['count'].to_numpy()
    starts = frame['bin_start_ps'].to_numpy()

    bad = np.flatnonzero(~np.isfinite(counts.astype(float)) | (counts < 0))
    if bad.size:
        raise FileFormatError(f"negative or non-finite count {counts[bad[0]]}",
                              str(reader.path), reader.row_line(int(bad[0])))
    expected = origin + np.arange(len(starts)) * bin_width
    misplaced = np.flatnonzero(np.abs(starts - expected) > 1e-6 * bin_width)
    if misplaced.size:
        row = int(misplaced[0])
        raise FileFormatError(f"bin start {starts[row]} does not follow origin + i * bin_width",
                              str(reader.path), reader.row_line(row))

    metadata = {key[len('meta.'):]: value for key, value in header.items() if key.startswith('meta.')}
    return TimeHistogram(bin_width, origin, counts, exposure, metadata)


# =============================================================================
# Events
# =============================================================================

def write_events(path: PathLike, events: EventTable, include_kind: bool = True) -> Path:
    """Write the event stream; ``include_kind=False`` emulates blinded data."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with_kind = include_kind and events.kind is not None
    lines = [
        f"# frame_ps = {format_number(events.frame_ps)}",
        f"# period_ps = {format_number(events.period_ps)}",
        f"# exposure_s = {format_number(events.exposure_s)}",
    ]
    lines.extend(f"# meta.{key} = {value}" for key, value in sorted(events.metadata.items()))
    columns = EVENT_COLUMNS if with_kind else EVENT_COLUMNS[:3]
    lines.append(','.join(columns))

    cycles = events.cycle_index.tolist()
    pulses = events.pulse_index.tolist()
    raw = _format_column(np.asarray(events.raw_time_ps, dtype=float))
    if with_kind:
        names = np.array(KIND_NAMES)[events.kind.astype(np.int64)].tolist()
        rows = [f"{c},{p},{r},{k}" for c, p, r, k in zip(cycles, pulses, raw, names)]
    else:
        rows = [f"{c},{p},{r}" for c, p, r in zip(cycles, pulses, raw)]
    with open(path, 'w', encoding='utf-8', newline='\n') as handle:
        handle.write('\n'.join(lines) + '\n')
        if rows:
            handle.write('\n'.join(rows) + '\n')
    logger.info(f"Wrote {len(events)} events to {path}{'' if with_kind else ' (blinded)'}")
    return path


def read_events(path: PathLike) -> EventTable:
    reader = TableFileReader(path)
    header = reader.read_header()
    if reader.columns not in (EVENT_COLUMNS, EVENT_COLUMNS[:3]):
        raise FileFormatError(f"expected columns {EVENT_COLUMNS}, found {reader.columns}",
                              str(reader.path), reader.column_line)
    dtypes = {'cycle': np.int64, 'pulse': np.int64, 'raw_time_ps': float}
    if 'kind' in reader.columns:
        dtypes['kind'] = str
    frame = reader.read_table(dtypes)

    kind = None
    if 'kind' in reader.columns:
        codes = frame['kind'].map({name: i for i, name in enumerate(KIND_NAMES)})
        unknown = np.flatnonzero(codes.isna().to_numpy())
        if unknown.size:
            row = int(unknown[0])
            raise FileFormatError(f"unknown event kind {frame['kind'].iloc[row]!r}",
                                  str(reader.path), reader.row_line(row))
        kind = codes.to_numpy().astype(np.int8)

    metadata = {key[len('meta.'):]: value for key, value in header.items() if key.startswith('meta.')}
    return EventTable(frame['cycle'].to_numpy(), frame['pulse'].to_numpy(),
                      frame['raw_time_ps'].to_numpy(), kind,
                      frame_ps=reader.header_float('frame_ps'),
                      period_ps=reader.header_float('period_ps'),
                      exposure_s=reader.header_float('exposure_s', 0.0),
                      metadata=metadata)


# =============================================================================
# Lifetime results
# =============================================================================

def write_lifetime_result(path: PathLike, result: LifetimeResult, extra: Optional[Dict[str, Any]] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {'lifetime': result.to_dict()}
    if extra:
        payload.update(extra)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + '\n', encoding='utf-8')
    return path


def read_lifetime_result(path: PathLike) -> LifetimeResult:
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding='utf-8'))
        return LifetimeResult.from_dict(payload.get('lifetime', payload))
    except json.JSONDecodeError as error:
        raise FileFormatError(f"invalid JSON: {error.msg}", str(path), error.lineno)
    except (KeyError, TypeError, ValueError) as error:
        raise FileFormatError(f"not a lifetime result: {error}", str(path))


# =============================================================================
# Run manifests
# =============================================================================

@dataclass(frozen=True)
class RunManifest:
    config: ExperimentConfig
    code_version: str
    created_at: str
    seed: int
    outputs: Dict[str, str] = field(default_factory=dict)

    @classmethod
    def create(cls, experiment: ExperimentConfig, outputs: Dict[str, str]) -> 'RunManifest':
        return cls(experiment, app_config.APP_VERSION, datetime.now().isoformat(timespec='seconds'),
                   experiment.seed, dict(outputs))

    def to_dict(self) -> Dict[str, Any]:
        from config_loader import config_to_items
        return {
            'code_version': self.code_version,
            'created_at': self.created_at,
            'seed': self.seed,
            'config': dict(config_to_items(self.config, self.outputs.get('irf_file'))),
            'outputs': dict(sorted(self.outputs.items())),
        }


def write_manifest(path: PathLike, manifest: RunManifest) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest.to_dict(), indent=2) + '\n', encoding='utf-8')
    return path


def read_manifest(path: PathLike) -> RunManifest:
    from config_loader import config_from_items
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding='utf-8'))
    except json.JSONDecodeError as error:
        raise FileFormatError(f"invalid JSON: {error.msg}", str(path), error.lineno)
    try:
        experiment = config_from_items(payload['config'], base_dir=path.parent, source=str(path))
        return RunManifest(experiment, str(payload['code_version']), str(payload['created_at']),
                           int(payload['seed']), dict(payload.get('outputs', {})))
    except KeyError as error:
        raise FileFormatError(f"manifest misses {error}", str(path))
