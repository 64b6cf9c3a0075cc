# report.py - Lifetime report assembly and text/CSV rendering
"""
A Report gathers stored operation outputs (lifetime results, scan tables,
decay-curve residual tables, fit quality) and renders them. Rendering only
formats values; nothing is recomputed here.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import pandas as pd

from analysis import LifetimeResult
from presets import PUBLISHED_LIFETIMES

logger = logging.getLogger(__name__)

FORMATS = ('text', 'csv')


@dataclass
class Report:
    title: str
    results: List[LifetimeResult] = field(default_factory=list)
    combined: List[LifetimeResult] = field(default_factory=list)
    scans: Dict[str, pd.DataFrame] = field(default_factory=dict)
    residuals: Dict[str, pd.DataFrame] = field(default_factory=dict)
    gof: Dict[str, float] = field(default_factory=dict)
    flags: Dict[str, Any] = field(default_factory=dict)
    settings: Dict[str, Any] = field(default_factory=dict)
    reference: List[Dict[str, Any]] = field(default_factory=list)

    def results_frame(self) -> pd.DataFrame:
        rows = []
        for kind, items in (('measurement', self.results), ('combined', self.combined)):
            for result in items:
                row = result.to_dict()
                row['kind'] = kind
                rows.append(row)
        columns = ['kind', 'trap_label', 'tau_ns', 'stat_error_ns', 'sys_error_ns', 'final_error_ns',
                   'combine_rule', 'n_inputs']
        return pd.DataFrame(rows, columns=columns)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'title': self.title,
            'results': [r.to_dict() for r in self.results],
            'combined': [r.to_dict() for r in self.combined],
            'gof': dict(self.gof),
            'flags': dict(self.flags),
            'settings': dict(self.settings),
            'reference': list(self.reference),
        }


def reference_comparison(results: Sequence[LifetimeResult]) -> List[Dict[str, Any]]:
    """Pair results with the published values: per-trap rows for 'level trap' labels, finals for levels.

    A per-trap reference error is the quadrature sum of its statistical and systematic parts.
    """
    rows = []
    for result in results:
        words = result.trap_label.split()
        if not words or words[0] not in PUBLISHED_LIFETIMES:
            continue
        published = PUBLISHED_LIFETIMES[words[0]]
        if len(words) == 1:
            tau_ref, error_ref = published['final']
        elif words[1] in published:
            tau_ref, stat_ref, sys_ref = published[words[1]]
            error_ref = math.hypot(stat_ref, sys_ref)
        else:
            continue
        rows.append({'trap_label': result.trap_label, 'tau_ns': result.tau_ns,
                     'final_error_ns': result.final_error_ns,
                     'reference_tau_ns': tau_ref, 'reference_error_ns': error_ref})
    return rows


def build_report(title: str, results: Sequence[LifetimeResult],
                 combined: Optional[Sequence[LifetimeResult]] = None,
                 scans: Optional[Dict[str, pd.DataFrame]] = None,
                 residuals: Optional[Dict[str, pd.DataFrame]] = None,
                 gof: Optional[Dict[str, float]] = None,
                 flags: Optional[Dict[str, Any]] = None,
                 settings: Optional[Dict[str, Any]] = None) -> Report:
    combined = list(combined or [])
    return Report(title=title, results=list(results), combined=combined,
                  scans=dict(scans or {}), residuals=dict(residuals or {}), gof=dict(gof or {}),
                  flags=dict(flags or {}), settings=dict(settings or {}),
                  reference=reference_comparison(list(results) + combined))


def _row(result: LifetimeResult) -> str:
    return (f"{result.trap_label:<22} {result.tau_ns:>9.4f} {result.stat_error_ns:>9.4f} "
            f"{result.sys_error_ns:>9.4f} {result.final_error_ns:>9.4f}  {result.combine_rule}")


def render_text(report: Report) -> str:
    lines = [report.title, '=' * len(report.title), '',
             'Lifetime measurement results (ns)',
             f"{'trap':<22} {'tau':>9} {'stat':>9} {'sys':>9} {'final':>9}  rule"]
    lines += [_row(r) for r in report.results]
    if report.combined:
        lines.append('-' * 72)
        lines += [_row(r) for r in report.combined]

    if report.reference:
        lines += ['', 'Reference values (ns)']
        for row in report.reference:
            lines.append(f"{row['trap_label']:<22} {row['tau_ns']:.4f} +/- {row['final_error_ns']:.4f}"
                         f"   reference {row['reference_tau_ns']:.3f} +/- {row['reference_error_ns']:.3f}")

    if report.gof:
        lines += ['', 'Fit quality (deviance / ndf)']
        lines += [f"  {name}: {value:.4f}" for name, value in report.gof.items()]
    if report.flags:
        lines += ['', 'Diagnostics']
        lines += [f"  {name}: {value}" for name, value in report.flags.items()]
    for name, table in report.scans.items():
        lines += ['', f"Start-time scan: {name}", table.to_string(index=False, float_format=lambda v: f"{v:.5f}")]
    if report.settings:
        lines += ['', 'Settings']
        lines += [f"  {key} = {value}" for key, value in report.settings.items()]
    lines += ['', 'Full-precision values']
    for result in report.results + report.combined:
        lines.append(f"  {result.trap_label}: tau={result.tau_ns!r} stat={result.stat_error_ns!r} "
                     f"sys={result.sys_error_ns!r} final={result.final_error_ns!r}")
    return '\n'.join(lines) + '\n'


def write_report(report: Report, out_dir, fmt: str = 'text') -> List[Path]:
    """Write the report plus its plot-ready tables; returns the written paths."""
    if fmt not in FORMATS:
        raise ValueError(f"unknown report format '{fmt}'")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    if fmt == 'text':
        path = out / 'report.txt'
        path.write_text(render_text(report), encoding='utf-8')
    else:
        path = out / 'results.csv'
        report.results_frame().to_csv(path, index=False, float_format='%.17g')
    written.append(path)

    summary = out / 'report.json'
    summary.write_text(json.dumps(report.to_dict(), indent=2, default=str) + '\n', encoding='utf-8')
    written.append(summary)

    for name, table in report.scans.items():
        path = out / f"scan_{_slug(name)}.csv"
        table.to_csv(path, index=False, float_format='%.17g')
        written.append(path)
    for name, table in report.residuals.items():
        path = out / f"decay_curve_{_slug(name)}.csv"
        table.to_csv(path, index=False, float_format='%.17g')
        written.append(path)
    logger.info(f"Report written to {out} ({len(written)} files)")
    return written


def _slug(name: str) -> str:
    return ''.join(c if c.isalnum() else '_' for c in name).strip('_').lower() or 'data'
