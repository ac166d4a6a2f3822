"""Shared synthetic fixtures: small plates that render in milliseconds"""

import math

import numpy as np
import pytest

from autoencoder import AugmentationConfig, AutoencoderConfig, FeatureExtractor, build_autoencoder
from depth_volume import CalibrationProfile
from meal_classifier import MealHead
from nutrients import NutrientVector, PortionSpec
from plate_dataset import FoodShape, GeneratorSettings, MealPlan, generate_plate_series

LEVELS = [0.0, 0.25, 0.5, 0.75, 1.0]


def portion(name, calories, volume=10.0, mass=12.0, texture="regular", **nutrients):
    vector = NutrientVector(calories=calories, protein=calories / 20, iron=calories / 100,
                            vitamin_c=calories / 50, **nutrients)
    return PortionSpec(name, vector, portion_mass=mass, portion_volume=volume, texture=texture)


@pytest.fixture
def cal():
    return CalibrationProfile()


@pytest.fixture
def small_settings():
    # 72 px frame, plate disc radius ~34 px
    return GeneratorSettings(image_size=72, plate_radius_cm=2.9, noise_sigma_cm=0.0)


@pytest.fixture
def three_class_plan():
    return MealPlan("lunch", (
        portion("carrots", 40.0, texture="regular"),
        portion("mince", 90.0, texture="minced"),
        portion("puree", 60.0, texture="pureed"),
    ))


@pytest.fixture
def three_class_shapes():
    return (
        FoodShape(profile="slab", radius_cm=0.8, height_cm=1.0, color=(230, 120, 30)),
        FoodShape(profile="dome", radius_cm=0.8, height_cm=0.9, color=(120, 60, 40)),
        FoodShape(profile="rough", radius_cm=0.7, height_cm=0.8, color=(80, 160, 60)),
    )


@pytest.fixture
def one_class_plan():
    return MealPlan("soup", (portion("pea_soup", 120.0, volume=8.0, mass=8.4, texture="pureed"),))


@pytest.fixture
def one_class_shapes():
    return (FoodShape(profile="slab", radius_cm=1.2, height_cm=1.0, color=(110, 170, 60)),)


@pytest.fixture
def three_class_series(three_class_plan, three_class_shapes, cal, small_settings):
    return generate_plate_series(three_class_plan, three_class_shapes, LEVELS, 7, cal, small_settings,
                                 series_id="lunch-000")


@pytest.fixture
def one_class_series(one_class_plan, one_class_shapes, cal, small_settings):
    return generate_plate_series(one_class_plan, one_class_shapes, LEVELS, 3, cal, small_settings,
                                 series_id="soup-000")


@pytest.fixture
def tiny_ae_config():
    return AutoencoderConfig(encoder_channels=[4], latent_channels=16, batch_size=4, patch_size=8,
                             patches_per_image=1, max_epochs=3, learning_rate=1e-3)


@pytest.fixture
def tiny_augmentation():
    return AugmentationConfig(n_images=8)


@pytest.fixture
def untrained_extractor(tiny_ae_config):
    model, splice = build_autoencoder(tiny_ae_config)
    return FeatureExtractor.from_autoencoder(model, splice, {"note": "untrained"})


@pytest.fixture
def single_class_head(one_class_plan):
    """Any head over one class labels every food pixel with it"""
    return MealHead(
        meal_id=one_class_plan.meal_id,
        weight=np.zeros((1, 16)),
        bias=None,
        class_ids=(0,),
        class_names=tuple(one_class_plan.class_names()),
        class_textures=tuple(c.texture for c in one_class_plan.classes),
    )


def disc(shape, center, radius):
    rows, cols = np.indices(shape)
    return (rows - center[0]) ** 2 + (cols - center[1]) ** 2 <= radius ** 2


def hemisphere_depth(radius_cm, pitch_cm, table_cm):
    n = int(math.ceil(radius_cm / pitch_cm)) + 2
    offsets = (np.arange(-n, n + 1)) * pitch_cm
    y, x = np.meshgrid(offsets, offsets, indexing="ij")
    height = np.sqrt(np.maximum(radius_cm ** 2 - x * x - y * y, 0.0))
    return table_cm - height, height > 0
