#!/usr/bin/env python3
"""
Configuration Management for Plate Nutrient Tracker
Loads app_config.json over the built-in defaults and validates every section
"""

import copy
import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

from dotenv import load_dotenv
from pydantic import BaseModel, Field, ValidationError

from autoencoder import AugmentationConfig, AutoencoderConfig
from depth_volume import CalibrationProfile
from errors import ConfigError
from meal_classifier import MealHeadConfig
from plate_dataset import GeneratorSettings
from segmentation import SegmenterConfig

logger = logging.getLogger(__name__)

CONFIG_FILE = "app_config.json"
CONFIG_ENV_VAR = "PLATE_TRACKER_CONFIG"

# Mirrored by app_config.json; load_config merges the file over this.
DEFAULT_CONFIG: Dict[str, Any] = {
    "seed": 0,
    "paths": {
        "data_dir": "data",
        "study_plan": "data/study_plan.json",
        "manifest": "data/manifest.jsonl",
        "nutrient_table": "data/foods.csv",
        "weights_dir": "models",
        "autoencoder": "models/autoencoder.pntw",
        "head_registry": "models/heads.json",
        "report_dir": "reports",
    },
    "calibration": {
        "reference_pixel_width_cm": 0.086,
        "reference_distance_cm": 44.0,
        "table_distance_cm": 44.0,
    },
    "generator": {
        "image_size": 160,
        "plate_radius_cm": 6.5,
        "noise_sigma_cm": 0.1,
        "plate_rgb": [235, 235, 228],
        "table_rgb": [70, 62, 55],
        "schedule": "uniform",
        "levels": [0.0, 0.25, 0.5, 0.75, 1.0],
    },
    "augmentation": {
        "n_images": 300,
        "flip_probability": 0.5,
        "rotate90": True,
        "max_free_rotation_deg": 0.0,
        "contrast_range": [0.8, 1.2],
    },
    "autoencoder": {
        "encoder_channels": [16, 16],
        "kernel_size": 3,
        "downsample_stages": 0,
        "latent_channels": 16,
        "learning_rate": 0.0001,
        "batch_size": 32,
        "min_delta": 0.0001,
        "patience": 5,
        "validation_fraction": 0.3,
        "patch_size": 32,
        "patches_per_image": 4,
        "max_epochs": 100,
    },
    "meal_head": {
        "learning_rate": 0.1,
        "min_delta": 0.00001,
        "patience": 5,
        "validation_fraction": 0.3,
        "batch_size": 32,
        "max_epochs": 200,
        "use_bias": True,
        "pixels_per_image": 256,
        "full_portions_only": True,
    },
    "segmenter": {
        "color_threshold": 40.0,
        "opening_radius": 1,
        "closing_radius": 2,
        "annulus": [0.9, 1.0],
        "plate_rgb": None,
        "plate_circle": None,
        "flag_iou_below": 0.5,
    },
    "evaluation": {
        "mask_source": "ground-truth",
        "texture_filter": None,
        "threads": 1,
        "registration_points": None,
    },
}


class PathsConfig(BaseModel):
    data_dir: str = "data"
    study_plan: str = "data/study_plan.json"
    manifest: str = "data/manifest.jsonl"
    nutrient_table: str = "data/foods.csv"
    weights_dir: str = "models"
    autoencoder: str = "models/autoencoder.pntw"
    head_registry: str = "models/heads.json"
    report_dir: str = "reports"


class EvaluationConfig(BaseModel):
    mask_source: str = Field(default="ground-truth", pattern="^(ground-truth|baseline)$")
    texture_filter: Optional[Union[str, Dict[str, str]]] = Field(
        default=None, description="one texture for every meal, or meal_id -> texture")
    threads: int = Field(default=1, ge=1)
    registration_points: Optional[List[Tuple[float, float, float, float]]] = Field(
        default=None, description="(x_color, y_color, x_depth, y_depth) control points")

    def texture_for(self, meal_id: str) -> Optional[str]:
        if isinstance(self.texture_filter, dict):
            return self.texture_filter.get(meal_id)
        return self.texture_filter


class PipelineConfig(BaseModel):
    seed: int = 0
    paths: PathsConfig = PathsConfig()
    calibration: CalibrationProfile = CalibrationProfile()
    generator: GeneratorSettings = GeneratorSettings()
    augmentation: AugmentationConfig = AugmentationConfig()
    autoencoder: AutoencoderConfig = AutoencoderConfig()
    meal_head: MealHeadConfig = MealHeadConfig()
    segmenter: SegmenterConfig = SegmenterConfig()
    evaluation: EvaluationConfig = EvaluationConfig()

    def seeded_autoencoder(self) -> AutoencoderConfig:
        return self.autoencoder.model_copy(update={"seed": self.seed})

    def seeded_meal_head(self) -> MealHeadConfig:
        return self.meal_head.model_copy(update={"seed": self.seed})


def _merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    """Recursive merge; values from override win"""
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def resolve_config_path(path: Optional[str] = None) -> Path:
    """--config wins, then PLATE_TRACKER_CONFIG (from the environment or .env), then app_config.json"""
    if path:
        return Path(path)
    load_dotenv()
    return Path(os.getenv(CONFIG_ENV_VAR, CONFIG_FILE))


def load_config(path: Optional[str] = None) -> PipelineConfig:
    """Load configuration from file or create default if not exists"""
    config_path = resolve_config_path(path)
    raw: Dict[str, Any] = {}
    if config_path.exists():
        try:
            with open(config_path, "r", encoding="utf-8") as f:
                raw = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{config_path}: invalid JSON at line {e.lineno}: {e.msg}") from e
        if not isinstance(raw, dict):
            raise ConfigError(f"{config_path}: top level must be an object")
    else:
        logger.info("No config at %s, writing defaults", config_path)
        save_config(DEFAULT_CONFIG, config_path)

    try:
        return PipelineConfig(**_merge(DEFAULT_CONFIG, raw))
    except ValidationError as e:
        raise ConfigError(f"{config_path}: {e}") from e


def save_config(config: Union[Dict[str, Any], PipelineConfig], path: Optional[Path] = None) -> bool:
    """Save configuration to file"""
    path = Path(path or CONFIG_FILE)
    if isinstance(config, PipelineConfig):
        config = config.model_dump(mode="json")
    try:
        if path.parent != Path(""):
            path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(config, f, indent=2, ensure_ascii=False)
        return True
    except OSError as e:
        logger.error("Error saving config: %s", e)
        return False


def apply_overrides(config: PipelineConfig, seed: Optional[int] = None, threads: Optional[int] = None,
                    paths: Optional[Dict[str, Optional[str]]] = None,
                    noise_sigma_cm: Optional[float] = None) -> PipelineConfig:
    """Command-line flags on top of the file; unset (None) values keep the configured ones"""
    if seed is not None:
        config = config.model_copy(update={"seed": seed})
    if threads is not None:
        if threads < 1:
            raise ConfigError("--threads must be >= 1")
        config = config.model_copy(
            update={"evaluation": config.evaluation.model_copy(update={"threads": threads})})

    updates: Dict[str, Any] = {}
    chosen = {key: str(value) for key, value in (paths or {}).items() if value is not None}
    if chosen:
        updates["paths"] = chosen
    if noise_sigma_cm is not None:
        updates["generator"] = {"noise_sigma_cm": noise_sigma_cm}
    if updates:
        try:
            config = PipelineConfig(**_merge(config.model_dump(), updates))
        except ValidationError as e:
            raise ConfigError(f"command-line override: {e}") from e
    return config


def config_hash(config: PipelineConfig) -> str:
    """SHA-256 of the canonical JSON form; thread count does not change results and is excluded"""
    data = config.model_dump(mode="json")
    data["evaluation"].pop("threads", None)
    canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
