from pathlib import Path

import pytest
import yaml

from app.config import load_settings
from app.errors import ConfigError
from app.models import Severity

REPO_SETTINGS = Path(__file__).resolve().parents[1] / "config" / "settings.yaml"


def _write(tmp_path: Path, payload: dict) -> str:
    path = tmp_path / "settings.yaml"
    path.write_text(yaml.safe_dump(payload, allow_unicode=True), encoding="utf-8")
    return str(path)


def test_repo_settings_load_with_env_defaults(monkeypatch) -> None:
    for name in ("RSS_SEED", "RSS_JOBS", "RSS_OUT_DIR", "RSS_LOG_LEVEL", "RSS_SERVER_PORT", "RSS_SERVER_HOST"):
        monkeypatch.delenv(name, raising=False)

    settings = load_settings(str(REPO_SETTINGS))

    assert settings.experiment.seed == 20231101
    assert settings.experiment.jobs == 1
    assert settings.experiment.out_dir == "runs/default"
    assert settings.experiment.checkpoint is None
    assert settings.physio.radar_snr_db is None
    assert settings.server_port == 8000
    assert settings.thresholds.enter == 0.6
    assert settings.model.downsample == 12


def test_env_placeholder_resolves_inline_value(tmp_path, monkeypatch) -> None:
    monkeypatch.setenv("RSS_OUT_DIR", "/data/runs")
    path = _write(tmp_path, {"experiment": {"out_dir": "${RSS_OUT_DIR:-runs/default}/night1"}})

    settings = load_settings(path)

    assert settings.experiment.out_dir == "/data/runs/night1"


def test_env_placeholder_falls_back_to_default(tmp_path, monkeypatch) -> None:
    monkeypatch.delenv("RSS_JOBS", raising=False)
    path = _write(tmp_path, {"experiment": {"jobs": "${RSS_JOBS:-3}"}})

    assert load_settings(path).experiment.jobs == 3


def test_overrides_win_and_none_is_ignored(tmp_path) -> None:
    path = _write(tmp_path, {"experiment": {"seed": 7, "jobs": 2}})

    settings = load_settings(path, {"experiment": {"seed": 11, "jobs": None}, "log_level": None})

    assert settings.experiment.seed == 11
    assert settings.experiment.jobs == 2
    assert settings.log_level == "INFO"


def test_missing_default_file_uses_builtin_defaults(tmp_path, monkeypatch) -> None:
    monkeypatch.chdir(tmp_path)

    settings = load_settings()

    assert settings.experiment.cohort_size == 24
    assert settings.experiment.severity_mix[Severity.MODERATE] == 0.0


def test_missing_explicit_file_is_config_error(tmp_path) -> None:
    with pytest.raises(ConfigError) as exc:
        load_settings(str(tmp_path / "nope.yaml"))
    assert exc.value.exit_code == 2


@pytest.mark.parametrize(
    "payload",
    [
        {"experiment": {"severity_mix": {"healthy": 0.5, "mild": 0.2}}},
        {"experiment": {"cohort_size": 3, "k_folds": 4}},
        {"thresholds": {"enter": 0.3, "exit": 0.5}},
        {"model": {"pools": [2, 2, 2], "frames_per_epoch": 60}},
        {"model": {"kernel_size": 4}},
        {"train": {"stage_weight": 0.0, "event_weight": 0.0}},
        {"physio": {"unknown_key": 1}},
    ],
)
def test_invalid_settings_are_rejected(tmp_path, payload) -> None:
    with pytest.raises(ConfigError):
        load_settings(_write(tmp_path, payload))


def test_invalid_yaml_root_is_rejected(tmp_path) -> None:
    path = tmp_path / "settings.yaml"
    path.write_text("- just\n- a list\n", encoding="utf-8")

    with pytest.raises(ConfigError):
        load_settings(str(path))
