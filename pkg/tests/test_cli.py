# test_cli.py - End-to-end command line runs
import json

import numpy as np
import pytest

from analysis import LifetimeResult, ScanConfig, TimeHistogram, dark_background, extract_lifetime
from cli import main
from data_io import read_histogram, read_lifetime_result, write_histogram, write_lifetime_result
from studies import synthetic_decay_histogram


@pytest.fixture(autouse=True)
def short_irf_measurement(monkeypatch):
    monkeypatch.setenv('IRF_MEASUREMENT_S', '2')
    monkeypatch.setenv('DARK_MEASUREMENT_S', '2')


def simulate(out_dir, *extra):
    return main(['simulate', 'p32_quadrupole', '--out-dir', str(out_dir), '--no-db', *extra])


class TestSimulate:
    def test_writes_run_outputs(self, tmp_path, capsys):
        assert simulate(tmp_path, '--duration-s', '0.5', '--seed', '3') == 0
        for name in ('events.csv', 'raw_histogram.txt', 'histogram.txt', 'irf_histogram.txt',
                     'dark_histogram.txt', 'config.cfg', 'manifest.json'):
            assert (tmp_path / name).exists()
        dark = read_histogram(tmp_path / 'dark_histogram.txt')
        assert dark.metadata['kind'] == 'dark'
        assert dark.exposure_s == pytest.approx(2.0)
        assert read_histogram(tmp_path / 'histogram.txt').n_bins == 124
        assert json.loads((tmp_path / 'manifest.json').read_text())['seed'] == 3
        assert 'counts/s' in capsys.readouterr().out

    def test_rerun_is_byte_identical_across_worker_counts(self, tmp_path):
        assert simulate(tmp_path / 'a', '--duration-s', '0.3', '--seed', '8', '--workers', '1') == 0
        assert simulate(tmp_path / 'b', '--duration-s', '0.3', '--seed', '8', '--workers', '2') == 0
        for name in ('events.csv', 'histogram.txt', 'irf_histogram.txt'):
            assert (tmp_path / 'a' / name).read_bytes() == (tmp_path / 'b' / name).read_bytes()

    def test_blinded_events(self, tmp_path):
        assert simulate(tmp_path, '--duration-s', '0.1', '--blind') == 0
        text = (tmp_path / 'events.csv').read_text()
        assert 'cycle,pulse,raw_time_ps\n' in text
        assert ',kind' not in text

    def test_run_is_registered(self, tmp_path):
        assert main(['simulate', 'p12_quadrupole', '--out-dir', str(tmp_path), '--duration-s', '0.1']) == 0
        import database
        assert database.get_runs()[0]['command'] == 'simulate'

    def test_missing_config_is_io_error(self, tmp_path):
        assert main(['simulate', str(tmp_path / 'absent.cfg'), '--out-dir', str(tmp_path)]) == 4

    def test_measure_irf(self, tmp_path):
        assert main(['measure-irf', 'p32_quadrupole', '--out-dir', str(tmp_path), '--no-db',
                     '--irf-duration-s', '0.5']) == 0
        irf = read_histogram(tmp_path / 'irf_histogram.txt')
        assert irf.metadata['kind'] == 'irf'
        assert irf.total > 0


class TestFit:
    @pytest.mark.slow
    def test_simulate_fit_report(self, tmp_path, capsys):
        run = tmp_path / 'run'
        assert simulate(run, '--duration-s', '10', '--seed', '21') == 0
        assert main(['fit', str(run / 'histogram.txt'), '--irf', str(run / 'irf_histogram.txt'),
                     '--dark', str(run / 'dark_histogram.txt'),
                     '--label', 'P3/2 quadrupole', '--out-dir', str(tmp_path / 'fit')]) == 0
        result = read_lifetime_result(tmp_path / 'fit' / 'result_histogram.json')
        assert result.trap_label == 'P3/2 quadrupole'
        assert result.tau_ns == pytest.approx(2.647, rel=0.03)
        assert (tmp_path / 'fit' / 'report.txt').exists()
        assert 'P3/2 quadrupole' in capsys.readouterr().out

        assert main(['report', '--out-dir', str(tmp_path / 'report'), '--format', 'csv']) == 0
        assert (tmp_path / 'report' / 'results.csv').exists()

    def test_bad_histogram_is_io_error(self, tmp_path):
        bad = tmp_path / 'bad.txt'
        bad.write_text("# bin_width_ps = 100\n# origin_ps = 0\nbin_start_ps,count\n0,-1\n")
        assert main(['fit', str(bad), '--irf', str(bad), '--out-dir', str(tmp_path), '--no-db']) == 4

    def test_mismatched_irf_count(self, tmp_path):
        hist = synthetic_decay_histogram(2.647, 1e5, np.random.default_rng(1))
        path = write_histogram(tmp_path / 'h.txt', hist.with_metadata({'folded': 'true'}))
        assert main(['fit', str(path), str(path), str(path), '--irf', str(path), str(path),
                     '--out-dir', str(tmp_path), '--no-db']) == 2

    def test_mismatched_dark_count(self, tmp_path):
        hist = synthetic_decay_histogram(2.647, 1e5, np.random.default_rng(1))
        path = write_histogram(tmp_path / 'h.txt', hist.with_metadata({'folded': 'true'}))
        assert main(['fit', str(path), str(path), '--irf', str(path), '--dark', str(path), str(path), str(path),
                     '--out-dir', str(tmp_path), '--no-db']) == 2


class TestFitBackground:
    @pytest.fixture
    def inputs(self, tmp_path, template_data, irf_histogram):
        data = template_data(total=1e6, background=20.0)
        data = TimeHistogram(100.0, 0.0, data.counts, 60.0, data.metadata)
        dark = TimeHistogram(100.0, 0.0, np.full(124, 20, dtype=np.int64), 60.0,
                             {'folded': 'true', 'kind': 'dark'})
        irf = irf_histogram.with_metadata({'folded': 'true'})
        return {name: write_histogram(tmp_path / f"{name}.txt", hist)
                for name, hist in (('data', data), ('irf', irf), ('dark', dark))}

    def fit(self, tmp_path, inputs, out, *extra):
        assert main(['fit', str(inputs['data']), '--irf', str(inputs['irf']), '--label', 'P1/2 quadrupole',
                     '--out-dir', str(tmp_path / out), '--no-db', *extra]) == 0
        return read_lifetime_result(tmp_path / out / 'result_data.json')

    @pytest.mark.slow
    def test_dark_run_sets_the_fit_background(self, tmp_path, inputs):
        measured = self.fit(tmp_path, inputs, 'measured', '--dark', str(inputs['dark']))
        floated = self.fit(tmp_path, inputs, 'floated')

        background = dark_background(read_histogram(inputs['dark']), 60.0)
        direct = extract_lifetime(read_histogram(inputs['data']), read_histogram(inputs['irf']),
                                  ScanConfig.from_settings(), label='P1/2 quadrupole', background=background)
        assert measured.tau_ns == direct.lifetime.tau_ns
        assert measured.stat_error_ns < floated.stat_error_ns
        assert 'background per bin: 20.0000 +/- 0.4016' in (tmp_path / 'measured' / 'report.txt').read_text()
        assert 'background per bin: floated' in (tmp_path / 'floated' / 'report.txt').read_text()

    @pytest.mark.slow
    def test_zero_mode_ignores_the_dark_run(self, tmp_path, inputs):
        zero = self.fit(tmp_path, inputs, 'zero', '--dark', str(inputs['dark']), '--background', 'zero')
        measured = self.fit(tmp_path, inputs, 'measured', '--dark', str(inputs['dark']))
        assert zero.tau_ns != measured.tau_ns
        assert 'background per bin: 0.0000 +/- 0.0000' in (tmp_path / 'zero' / 'report.txt').read_text()


class TestScan:
    def test_scan_writes_table(self, tmp_path, capsys):
        hist = synthetic_decay_histogram(3.148, 2e5, np.random.default_rng(2))
        path = write_histogram(tmp_path / 'h.txt', hist.with_metadata({'folded': 'true'}))
        assert main(['scan', str(path), '--out-dir', str(tmp_path / 'scan'), '--no-db']) == 0
        assert len((tmp_path / 'scan' / 'scan.csv').read_text().splitlines()) == 22
        assert 'Scan flat' in capsys.readouterr().out

    def test_unfolded_input_needs_a_period(self, tmp_path):
        path = write_histogram(tmp_path / 'raw.txt', TimeHistogram(100.0, 0.0, np.ones(248, dtype=np.int64)))
        assert main(['scan', str(path), '--out-dir', str(tmp_path), '--no-db']) == 2


class TestPullStudy:
    def test_single_repeat_is_rejected(self, tmp_path):
        assert main(['pullstudy', 'p12_quadrupole', '--repeats', '1', '--out-dir', str(tmp_path),
                     '--no-db']) == 2

    def test_writes_pulls(self, tmp_path):
        assert main(['pullstudy', 'p12_quadrupole', '--repeats', '2', '--duration-s', '0.5',
                     '--out-dir', str(tmp_path)]) == 0
        summary = json.loads((tmp_path / 'pull_summary.json').read_text())
        assert summary['n_repeats'] == 2
        assert len((tmp_path / 'pulls.csv').read_text().splitlines()) == 3


class TestCombineAndReport:
    @pytest.fixture
    def result_files(self, tmp_path):
        quadrupole = write_lifetime_result(tmp_path / 'q.json',
                                           LifetimeResult.build('P3/2 quadrupole', 2.646, 0.002, 0.010))
        linear = write_lifetime_result(tmp_path / 'l.json',
                                       LifetimeResult.build('P3/2 linear', 2.649, 0.003, 0.010))
        return [str(quadrupole), str(linear)]

    def test_combine_reproduces_published_value(self, tmp_path, result_files, capsys):
        assert main(['combine', *result_files, '--label', 'P3/2', '--out-dir', str(tmp_path)]) == 0
        combined = read_lifetime_result(tmp_path / 'combined.json')
        assert round(combined.tau_ns, 3) == 2.647
        assert round(combined.final_error_ns, 3) == 0.010
        assert 'P3/2: 2.6469' in capsys.readouterr().out

    def test_report_from_files(self, tmp_path, result_files):
        assert main(['report', *result_files, '--out-dir', str(tmp_path / 'report')]) == 0
        text = (tmp_path / 'report' / 'report.txt').read_text()
        assert 'reference 2.647 +/- 0.010' in text

    def test_empty_registry_report(self, tmp_path):
        assert main(['report', '--out-dir', str(tmp_path)]) == 2

    def test_unreadable_result_file(self, tmp_path):
        path = tmp_path / 'broken.json'
        path.write_text('not json')
        assert main(['combine', str(path), '--out-dir', str(tmp_path)]) == 4
