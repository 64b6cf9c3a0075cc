# cli.py - Command line for Ion Lifetime Twin
"""
Usage: python cli.py <command> [options]

Commands: simulate, measure-irf, fit, scan, pullstudy, combine, report.
Each ``cmd_*`` function takes the parsed arguments and returns an exit code:
0 success, 2 validation error, 3 fit/extraction failure, 4 I/O error.
"""

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import database
from analysis import (BACKGROUND_MODES, BackgroundEstimate, ScanConfig, TimeHistogram, background_estimate,
                      combine_measurements, dark_background, decay_curve_table, extract_lifetime,
                      fold_and_invert, histogram_events, is_folded, scan_start_time, scan_table)
from config import config
from config_loader import load_config, write_config
from data_io import (RunManifest, read_histogram, read_lifetime_result, write_events,
                     write_histogram, write_lifetime_result, write_manifest)
from errors import EXIT_FIT_FAILURE, EXIT_OK, ConfigurationError, ExtractionError, exit_code_for
from physics_sim import (ExperimentConfig, describe_config, run_experiment, simulate_dark_measurement,
                         simulate_irf_measurement)
from report import build_report, render_text, write_report
from studies import pull_study

logger = logging.getLogger(__name__)


def setup_logging(level: Optional[str] = None) -> logging.Logger:
    """File handler under LOG_DIR plus a stream handler."""
    log_dir = Path(config.LOG_DIR)
    log_dir.mkdir(parents=True, exist_ok=True)
    logging.basicConfig(
        level=getattr(logging, (level or config.LOG_LEVEL).upper(), logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[
            logging.FileHandler(log_dir / 'lifetime_twin.log'),
            logging.StreamHandler(),
        ],
        force=True,
    )
    return logging.getLogger('lifetime_twin')


def _apply_overrides(experiment: ExperimentConfig, args) -> ExperimentConfig:
    changes = {}
    if getattr(args, 'seed', None) is not None:
        changes['seed'] = args.seed
    if getattr(args, 'duration_s', None) is not None:
        changes['duration_s'] = args.duration_s
    return replace(experiment, **changes) if changes else experiment


def _register_run(args, command: str, manifest: RunManifest) -> None:
    if args.no_db:
        return
    database.init_db()
    database.save_run(command, manifest.to_dict(), str(args.out_dir))


def _folded(hist: TimeHistogram, period_ns: Optional[float], source: str) -> TimeHistogram:
    if is_folded(hist):
        return hist
    period_ps = period_ns * 1000.0 if period_ns else float(hist.metadata.get('period_ps', 0) or 0)
    if not period_ps:
        raise ConfigurationError(f"{source} is not folded and carries no period; pass --period-ns",
                                 key='period_ns')
    return fold_and_invert(hist, period_ps)


def _scan_config(args) -> ScanConfig:
    return ScanConfig.from_settings(step_ns=getattr(args, 'step_ns', None),
                                    max_offset_ns=getattr(args, 'max_offset_ns', None),
                                    model=getattr(args, 'model', None),
                                    background=getattr(args, 'background', None))


def _measured_background(args, index: int, data: TimeHistogram) -> Optional[BackgroundEstimate]:
    """Background from the dark-count file for data file ``index``; None without one."""
    dark_paths = getattr(args, 'dark', None) or []
    if not dark_paths:
        return None
    path = dark_paths[min(index, len(dark_paths) - 1)]
    dark = _folded(read_histogram(path), args.period_ns, path)
    return dark_background(dark, data.exposure_s)


# =============================================================================
# Commands
# =============================================================================

def cmd_simulate(args) -> int:
    experiment = _apply_overrides(load_config(args.config), args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    logger.info(f"Simulating {describe_config(experiment)}")
    events = run_experiment(experiment, workers=args.workers)
    raw = histogram_events(events, experiment.tdc.bin_width_ps, experiment.frame_ps)
    folded = fold_and_invert(raw, experiment.period_ps)
    irf = simulate_irf_measurement(experiment, workers=args.workers)
    dark = simulate_dark_measurement(experiment, workers=args.workers)

    outputs = {
        'events': str(write_events(out / 'events.csv', events, include_kind=not args.blind)),
        'raw_histogram': str(write_histogram(out / 'raw_histogram.txt', raw)),
        'histogram': str(write_histogram(out / 'histogram.txt', folded)),
        'irf_histogram': str(write_histogram(out / 'irf_histogram.txt', irf)),
        'dark_histogram': str(write_histogram(out / 'dark_histogram.txt', dark)),
        'config': str(write_config(experiment, out / 'config.cfg')),
    }
    manifest = RunManifest.create(experiment, outputs)
    write_manifest(out / 'manifest.json', manifest)
    _register_run(args, 'simulate', manifest)

    expected = experiment.expected_rate_hz() * events.exposure_s
    rate = len(events) / events.exposure_s if events.exposure_s else 0.0
    print(f"Simulated {len(events)} events in {events.exposure_s:g} s ({rate:.0f} counts/s); "
          f"expected {expected:.0f} ({experiment.expected_rate_hz():.0f} counts/s)")
    if len(events) == 0:
        logger.warning("Simulation produced no events; check detection efficiency and rates")
        print("Warning: no events were generated")
    print(f"Outputs written to {out}")
    return EXIT_OK


def cmd_measure_irf(args) -> int:
    experiment = _apply_overrides(load_config(args.config), args)
    irf = simulate_irf_measurement(experiment, duration_s=args.irf_duration_s, workers=args.workers)
    path = write_histogram(Path(args.out_dir) / 'irf_histogram.txt', irf)
    manifest = RunManifest.create(experiment, {'irf_histogram': str(path)})
    write_manifest(Path(args.out_dir) / 'irf_manifest.json', manifest)
    _register_run(args, 'measure-irf', manifest)
    print(f"IRF histogram with {irf.total} counts written to {path}")
    return EXIT_OK


def cmd_fit(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if len(args.irf) not in (1, len(args.data)):
        raise ConfigurationError("give one IRF file or one per data file", key='irf')
    if args.dark and len(args.dark) not in (1, len(args.data)):
        raise ConfigurationError("give one dark-count file or one per data file", key='dark')
    labels = args.label or []
    scan_config = _scan_config(args)

    results, scans, residuals, gof, flags = [], {}, {}, {}, {}
    for i, data_path in enumerate(args.data):
        data = _folded(read_histogram(data_path), args.period_ns, data_path)
        irf = _folded(read_histogram(args.irf[min(i, len(args.irf) - 1)]), args.period_ns, 'IRF')
        label = labels[i] if i < len(labels) else (data.metadata.get('transition') or Path(data_path).stem)

        background = _measured_background(args, i, data)
        level = scan_config.resolve_background(None if background is None else background.level)
        if level is None:
            flags[f"{label} background per bin"] = 'floated'
        else:
            level_error = background.error if scan_config.background == 'measured' else 0.0
            flags[f"{label} background per bin"] = f"{level:.4f} +/- {level_error:.4f}"
        region = background_estimate(data)
        flags[f"{label} pre-peak counts per bin"] = f"{region.level:.4f} +/- {region.error:.4f}"
        for warning in region.warnings:
            flags[f"{label} background warning"] = warning
        try:
            extraction = extract_lifetime(data, irf, scan_config, label=label, background=background)
        except ExtractionError as error:
            scan = error.diagnostics.get('data_scan')
            if scan is not None:
                scan_table(scan, error.diagnostics.get('template_scan')).to_csv(
                    out / f"scan_{Path(data_path).stem}_failed.csv", index=False, float_format='%.17g')
            (out / 'diagnostics.json').write_text(json.dumps(
                {k: v for k, v in error.diagnostics.items() if isinstance(v, (int, float, str))},
                indent=2) + '\n', encoding='utf-8')
            logger.error(f"Extraction failed for {data_path}: {error}")
            print(f"Extraction failed for {data_path}: {error}", file=sys.stderr)
            return EXIT_FIT_FAILURE

        lifetime = extraction.lifetime
        results.append(lifetime)
        scans[label] = scan_table(extraction.data_scan, extraction.template_scan)
        residuals[label] = decay_curve_table(data, extraction.plateau_fit)
        gof[f"{label} plateau fit"] = extraction.plateau_fit.gof
        gof[f"{label} scan match chi2/ndf"] = extraction.match_chi2_ndf
        flags[f"{label} prompt fraction"] = f"{extraction.prompt_fraction:.5f}"
        flags[f"{label} scan flat"] = extraction.data_scan.is_flat()
        flags[f"{label} scan variation"] = f"{100 * extraction.data_scan.variation(scan_config.plateau_offset_ns):.3f}%"
        flags[f"{label} sys residual rms"] = f"{extraction.residual_rms_ns:.5f} ns"
        flags[f"{label} sys response timing"] = f"{extraction.alignment_error_ns:.5f} ns"
        write_lifetime_result(out / f"result_{Path(data_path).stem}.json", lifetime,
                              {'prompt_fraction': extraction.prompt_fraction,
                               'match_chi2_ndf': extraction.match_chi2_ndf})
        if not args.no_db:
            database.init_db()
            database.save_lifetime_result(lifetime, source=str(data_path),
                                          diagnostics={'match_chi2_ndf': extraction.match_chi2_ndf})

    combined = _combine_by_level(results)
    settings = {'scan_step_ns': scan_config.step_ns, 'scan_max_offset_ns': scan_config.max_offset_ns,
                'window_end_margin_ns': scan_config.end_margin_ns,
                'plateau_offset_ns': scan_config.plateau_offset_ns, 'model': scan_config.model,
                'background': scan_config.background,
                'defaults': 'scan step, range and margins are this tool\'s defaults'}
    report = build_report('Lifetime fit', results, combined, scans, residuals, gof, flags, settings)
    write_report(report, out, args.format)
    print(render_text(report))
    return EXIT_OK


def _combine_by_level(results: Sequence) -> List:
    """Combine results that share a level (first word of the trap label) when there is more than one."""
    groups: Dict[str, List] = {}
    for result in results:
        groups.setdefault(result.trap_label.split()[0] if result.trap_label else '', []).append(result)
    return [combine_measurements(items, common_sys=True, label=level)
            for level, items in groups.items() if len(items) > 1 or len(results) == 1]


def cmd_scan(args) -> int:
    data = _folded(read_histogram(args.data), args.period_ns, args.data)
    background = _measured_background(args, 0, data)
    scan = scan_start_time(data, _scan_config(args),
                           background_level=None if background is None else background.level)
    table = scan.to_frame()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table.to_csv(out / 'scan.csv', index=False, float_format='%.17g')
    print(table.to_string(index=False))
    print(f"Scan flat: {scan.is_flat()} (max deviation {scan.max_deviation_sigma():.2f} sigma)")
    return EXIT_OK


def cmd_pullstudy(args) -> int:
    experiment = _apply_overrides(load_config(args.config), args)
    study = pull_study(experiment, args.repeats, master_seed=args.seed, method=args.method,
                       scan_config=_scan_config(args), workers=args.workers)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    study.to_frame().to_csv(out / 'pulls.csv', index=False, float_format='%.17g')
    summary = study.summary()
    (out / 'pull_summary.json').write_text(json.dumps(summary, indent=2) + '\n', encoding='utf-8')
    if not args.no_db:
        database.init_db()
        database.save_pull_study(summary, config_source=str(args.config))
    print(f"Pulls: mean {summary['pull_mean']:.3f}, width {summary['pull_width']:.3f}; "
          f"relative spread {100 * summary['relative_spread']:.3f}%")
    return EXIT_OK


def cmd_combine(args) -> int:
    results = [read_lifetime_result(path) for path in args.results]
    combined = combine_measurements(results, common_sys=not args.independent_sys, label=args.label)
    out = Path(args.out_dir)
    write_lifetime_result(out / 'combined.json', combined)
    print(f"{combined.trap_label}: {combined.tau_ns:.4f} +/- {combined.final_error_ns:.4f} ns "
          f"(stat {combined.stat_error_ns:.4f}, sys {combined.sys_error_ns:.4f}, {combined.combine_rule})")
    return EXIT_OK


def cmd_report(args) -> int:
    if args.results:
        results = [read_lifetime_result(path) for path in args.results]
    else:
        database.init_db()
        results = database.get_lifetime_results(args.labels or None)
    if not results:
        raise ConfigurationError("no lifetime results to report", key='results')
    report = build_report('Lifetime measurement results', results, _combine_by_level(results),
                          settings={'source': 'files' if args.results else config.DATABASE_PATH})
    write_report(report, args.out_dir, args.format)
    print(render_text(report))
    return EXIT_OK


# =============================================================================
# Parser
# =============================================================================

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--seed', type=int, default=None, help='random seed override')
    common.add_argument('--workers', type=int, default=config.DEFAULT_WORKERS, help='worker processes')
    common.add_argument('--out-dir', default=config.DATA_DIR, help='output directory')
    common.add_argument('--format', choices=['text', 'csv'], default='text', help='report format')
    common.add_argument('--log-level', default=None, help='logging level')
    common.add_argument('--no-db', action='store_true', help='do not record the run in the registry')

    analysis_options = argparse.ArgumentParser(add_help=False)
    analysis_options.add_argument('--period-ns', type=float, default=None, help='fold period for unfolded input')
    analysis_options.add_argument('--step-ns', type=float, default=None, help='start-time scan step')
    analysis_options.add_argument('--max-offset-ns', type=float, default=None, help='last scan start offset')
    analysis_options.add_argument('--model', choices=['wrapped', 'bare'], default=None, help='decay model')
    analysis_options.add_argument('--background', choices=list(BACKGROUND_MODES), default=None,
                                  help='background handling in the scan fits')
    analysis_options.add_argument('--dark', nargs='+', default=None,
                                  help='dark-count histogram file(s) measuring the background')

    parser = argparse.ArgumentParser(prog='cli.py', description=f"{config.APP_NAME} v{config.APP_VERSION}")
    commands = parser.add_subparsers(dest='command', required=True)

    simulate = commands.add_parser('simulate', parents=[common], help='simulate an experiment run')
    simulate.add_argument('config', help='config file or preset name')
    simulate.add_argument('--duration-s', type=float, default=None)
    simulate.add_argument('--blind', action='store_true', help='omit the truth column from the event file')
    simulate.set_defaults(handler=cmd_simulate)

    irf = commands.add_parser('measure-irf', parents=[common], help='simulate the IRF self-measurement')
    irf.add_argument('config', help='config file or preset name')
    irf.add_argument('--irf-duration-s', type=float, default=None)
    irf.set_defaults(handler=cmd_measure_irf)

    fit = commands.add_parser('fit', parents=[common, analysis_options], help='extract lifetimes')
    fit.add_argument('data', nargs='+', help='histogram files')
    fit.add_argument('--irf', nargs='+', required=True, help='IRF histogram file(s)')
    fit.add_argument('--label', nargs='+', default=None, help='trap labels, one per data file')
    fit.set_defaults(handler=cmd_fit)

    scan = commands.add_parser('scan', parents=[common, analysis_options], help='start-time scan only')
    scan.add_argument('data', help='histogram file')
    scan.set_defaults(handler=cmd_scan)

    pulls = commands.add_parser('pullstudy', parents=[common, analysis_options], help='pull study')
    pulls.add_argument('config', help='config file or preset name')
    pulls.add_argument('--repeats', type=int, default=200)
    pulls.add_argument('--method', choices=['fit', 'extract'], default='fit')
    pulls.add_argument('--duration-s', type=float, default=None)
    pulls.set_defaults(handler=cmd_pullstudy)

    combine = commands.add_parser('combine', parents=[common], help='combine lifetime results')
    combine.add_argument('results', nargs='+', help='result JSON files')
    combine.add_argument('--label', default=None)
    combine.add_argument('--independent-sys', action='store_true', help='systematic errors are independent')
    combine.set_defaults(handler=cmd_combine)

    report = commands.add_parser('report', parents=[common], help='render a results report')
    report.add_argument('results', nargs='*', help='result JSON files (default: registry)')
    report.add_argument('--labels', nargs='+', default=None, help='registry trap labels to include')
    report.set_defaults(handler=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.log_level)
    try:
        return args.handler(args)
    except Exception as error:
        code = exit_code_for(error)
        if code == 1:
            logger.exception(f"Unexpected failure in {args.command}")
        else:
            logger.error(f"{args.command} failed: {error}")
        print(f"Error: {error}", file=sys.stderr)
        return code


if __name__ == '__main__':
    sys.exit(main())
