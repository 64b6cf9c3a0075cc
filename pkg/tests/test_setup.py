# test_setup.py - First-run setup steps
import setup


class TestSetupSteps:
    def test_env_file_created_once(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        assert setup.create_env_file_if_missing()
        content = (tmp_path / '.env').read_text()
        assert 'SCAN_STEP_NS=0.2' in content
        assert 'SCAN_BACKGROUND=measured' in content
        assert 'DARK_MEASUREMENT_S=60' in content
        (tmp_path / '.env').write_text('APP_NAME=Custom\n')
        assert setup.create_env_file_if_missing()
        assert (tmp_path / '.env').read_text() == 'APP_NAME=Custom\n'

    def test_directories(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        assert setup.create_directories()
        assert (tmp_path / 'output').is_dir()

    def test_dependencies_present(self):
        assert setup.install_dependencies()

    def test_registry_initialized(self, capsys):
        assert setup.initialize_database()
        assert 'lifetime_results (0)' in capsys.readouterr().out

    def test_validation_run(self):
        assert setup.validate_system(duration_s=0.5)
