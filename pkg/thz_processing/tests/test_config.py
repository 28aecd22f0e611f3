"""
Tests for settings loading from the environment and .env files
"""

import os

import pytest

from thz_processing.cli import resolve
from thz_processing.config import Settings, load_settings
from thz_processing.errors import ConfigError


@pytest.fixture(autouse=True)
def clean_env(monkeypatch, tmp_path):
    for key in list(os.environ):
        if key.startswith("THZ_"):
            monkeypatch.delenv(key)
    monkeypatch.chdir(tmp_path)


class TestLoadSettings:
    def test_defaults(self):
        settings = load_settings()
        assert settings.omega == 2.0
        assert settings.nz == 91
        assert settings.epochs == 1200
        assert settings.batch_size == 4096
        assert settings.lr == 0.005
        assert settings.lr_decay == 0.99
        assert settings.lr_decay_every == 20
        assert settings.threads >= 1

    def test_env_file(self, tmp_path):
        path = tmp_path / "run.env"
        path.write_text("THZ_NZ=61\nTHZ_OMEGA=1.5\nTHZ_LOG_LEVEL=DEBUG\nOTHER=ignored\n")
        settings = load_settings(str(path))
        assert (settings.nz, settings.omega, settings.log_level) == (61, 1.5, "DEBUG")

    def test_dotenv_in_working_directory(self, tmp_path):
        (tmp_path / ".env").write_text("THZ_SEED=17\n")
        assert load_settings().seed == 17

    def test_environment_variables(self, monkeypatch):
        monkeypatch.setenv("THZ_EPOCHS", "5")
        assert load_settings().epochs == 5

    def test_file_overrides_environment(self, monkeypatch, tmp_path):
        monkeypatch.setenv("THZ_EPOCHS", "5")
        path = tmp_path / "run.env"
        path.write_text("THZ_EPOCHS=7\n")
        assert load_settings(str(path)).epochs == 7

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_settings(str(tmp_path / "absent.env"))

    def test_unparseable_value(self, tmp_path):
        path = tmp_path / "run.env"
        path.write_text("THZ_NZ=ninety\n")
        with pytest.raises(ConfigError):
            load_settings(str(path))

    @pytest.mark.parametrize("line", ["THZ_OMEGA=0", "THZ_NZ=0", "THZ_THREADS=0"])
    def test_invalid_values(self, tmp_path, line):
        path = tmp_path / "run.env"
        path.write_text(line + "\n")
        with pytest.raises(ConfigError):
            load_settings(str(path))


class TestResolve:
    def test_flag_wins(self):
        assert resolve(3, Settings(seed=9), "seed") == 3

    def test_setting_when_flag_absent(self):
        assert resolve(None, Settings(seed=9), "seed") == 9

    def test_zero_flag_is_kept(self):
        assert resolve(0.0, Settings(noise_sigma=0.05), "noise_sigma") == 0.0
