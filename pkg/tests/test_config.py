import json
from pathlib import Path

import pytest

from config import (
    CONFIG_ENV_VAR,
    DEFAULT_CONFIG,
    PipelineConfig,
    apply_overrides,
    config_hash,
    load_config,
    resolve_config_path,
    save_config,
)
from errors import ConfigError

REPO_CONFIG = Path(__file__).resolve().parent.parent / "app_config.json"


def test_bundled_config_mirrors_defaults():
    assert json.loads(REPO_CONFIG.read_text(encoding="utf-8")) == DEFAULT_CONFIG


def test_missing_file_writes_defaults(tmp_path):
    path = tmp_path / "cfg" / "app_config.json"
    config = load_config(str(path))
    assert path.exists()
    assert config.calibration.reference_pixel_width_cm == 0.086
    assert config.generator.plate_radius_cm == 6.5
    assert config.evaluation.mask_source == "ground-truth"


def test_partial_file_merges_over_defaults(tmp_path):
    path = tmp_path / "app_config.json"
    path.write_text(json.dumps({"seed": 9, "autoencoder": {"max_epochs": 2}}), encoding="utf-8")
    config = load_config(str(path))
    assert config.seed == 9
    assert config.autoencoder.max_epochs == 2
    assert config.autoencoder.batch_size == 32
    assert config.seeded_autoencoder().seed == 9
    assert config.seeded_meal_head().seed == 9


@pytest.mark.parametrize("content", [
    "{not json",
    "[1, 2]",
    json.dumps({"evaluation": {"mask_source": "psychic"}}),
    json.dumps({"calibration": {"reference_distance_cm": 50.0, "table_distance_cm": 44.0}}),
    json.dumps({"autoencoder": {"learning_rate": -1}}),
])
def test_invalid_files_raise_config_error(tmp_path, content):
    path = tmp_path / "app_config.json"
    path.write_text(content, encoding="utf-8")
    with pytest.raises(ConfigError):
        load_config(str(path))


def test_config_path_resolution(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv(CONFIG_ENV_VAR, raising=False)
    assert resolve_config_path() == Path("app_config.json")
    assert resolve_config_path("other.json") == Path("other.json")

    monkeypatch.setenv(CONFIG_ENV_VAR, "env.json")
    assert resolve_config_path() == Path("env.json")


def test_texture_filter_forms():
    config = PipelineConfig(evaluation={"texture_filter": {"pureed_dinner": "pureed"}})
    assert config.evaluation.texture_for("pureed_dinner") == "pureed"
    assert config.evaluation.texture_for("lunch") is None
    assert PipelineConfig(evaluation={"texture_filter": "minced"}).evaluation.texture_for("lunch") == "minced"


def test_overrides():
    config = apply_overrides(PipelineConfig(), seed=3, threads=4)
    assert (config.seed, config.evaluation.threads) == (3, 4)
    with pytest.raises(ConfigError):
        apply_overrides(PipelineConfig(), threads=0)


def test_hash_ignores_threads_only():
    base = PipelineConfig()
    assert config_hash(base) == config_hash(apply_overrides(base, threads=8))
    assert config_hash(base) != config_hash(apply_overrides(base, seed=1))
    assert len(config_hash(base)) == 64


def test_save_round_trip(tmp_path):
    config = apply_overrides(PipelineConfig(), seed=5)
    path = tmp_path / "saved.json"
    assert save_config(config, path)
    assert config_hash(load_config(str(path))) == config_hash(config)
