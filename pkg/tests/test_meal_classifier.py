import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings as h_settings, strategies as st

from autoencoder import to_input
from conftest import portion
from depth_volume import BACKGROUND
from errors import (
    EmptyAfterTextureFilter,
    EmptyMask,
    MaskDisagreement,
    MissingClassExample,
    MissingModel,
    UnknownMeal,
)
from meal_classifier import (
    LabelMask,
    MealHead,
    MealHeadConfig,
    classify_pixels,
    load_heads,
    load_meal_head,
    relabel_region,
    save_meal_head,
    select_head,
    top1_accuracy,
    train_meal_head,
)
from model_store import HeadRegistry
from plate_dataset import MealPlan, RgbdPlate

TEXTURES = ("regular", "minced", "pureed")


class ColourFeatures:
    """Stand-in extractor whose features are the masked RGB input"""
    channels = 3

    def encode(self, color, mask):
        return to_input(color, mask)


def _head(weight, bias=None, textures=TEXTURES):
    n = len(weight)
    return MealHead("lunch", np.asarray(weight, dtype=float), bias, tuple(range(n)),
                    tuple(f"food{i}" for i in range(n)), tuple(textures[:n]))


def _rgb_plate():
    color = np.zeros((4, 6, 3), dtype=np.uint8)
    color[:, :2] = (250, 10, 10)
    color[:, 2:4] = (10, 250, 10)
    color[:, 4:] = (10, 10, 250)
    mask = np.ones((4, 6), dtype=bool)
    mask[0, 0] = False
    return RgbdPlate(color=color, depth=np.full((4, 6), 40.0), food_mask=mask)


def test_parameter_count():
    assert _head(np.zeros((3, 16)), np.zeros(3)).parameter_count == 51
    assert _head(np.zeros((3, 16))).parameter_count == 48


def test_classify_by_strongest_channel():
    labels = classify_pixels(ColourFeatures(), _head(np.eye(3)), _rgb_plate()).labels
    assert labels[0, 0] == BACKGROUND
    assert (labels[1:, :2] == 0).all()
    assert (labels[:, 2:4] == 1).all()
    assert (labels[:, 4:] == 2).all()


@h_settings(max_examples=25, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(scale=st.floats(1e-3, 1e3))
def test_labels_ignore_positive_head_scaling(untrained_extractor, three_class_series, scale):
    plate = three_class_series.reference
    weight = np.random.default_rng(5).normal(size=(3, 16))
    bias = np.array([0.1, -0.2, 0.05])
    labels = classify_pixels(untrained_extractor, _head(weight, bias), plate).labels
    scaled = classify_pixels(untrained_extractor, _head(weight * scale, bias * scale), plate).labels
    assert np.array_equal(labels, scaled)


def test_ties_go_to_lowest_row(untrained_extractor, three_class_series):
    plate = three_class_series.reference
    labels = classify_pixels(untrained_extractor, _head(np.zeros((3, 16))), plate)
    assert set(np.unique(labels.labels[plate.food_mask])) == {0}


def test_predicted_mask_overrides_plate_mask():
    plate = _rgb_plate()
    only_left = np.zeros(plate.shape, dtype=bool)
    only_left[:, :2] = True
    labels = classify_pixels(ColourFeatures(), _head(np.eye(3)), plate, only_left)
    assert labels.pixel_counts() == {0: 8}
    empty = classify_pixels(ColourFeatures(), _head(np.eye(3)), plate, np.zeros(plate.shape, dtype=bool))
    assert not empty.food_mask.any()


def test_texture_filter_keeps_meal_numbering():
    head = _head(np.eye(3))
    pureed = select_head("lunch", "pureed", {"lunch": head})
    assert pureed.class_ids == (2,)
    labels = classify_pixels(ColourFeatures(), pureed, _rgb_plate()).labels
    assert set(np.unique(labels)) == {BACKGROUND, 2}

    assert select_head("lunch", None, {"lunch": head}) is head
    with pytest.raises(UnknownMeal):
        select_head("dinner", None, {"lunch": head})
    with pytest.raises(EmptyAfterTextureFilter):
        select_head("lunch", "pureed", {"lunch": _head(np.eye(2))})


# --- scoring ---

def test_top1_accuracy():
    truth = LabelMask(np.array([[0, 0, 1, BACKGROUND]]))
    assert top1_accuracy(LabelMask(np.array([[0, 1, 1, BACKGROUND]])), truth) == pytest.approx(2 / 3)

    shifted = LabelMask(np.array([[BACKGROUND, 0, 1, 1]]))
    with pytest.raises(MaskDisagreement):
        top1_accuracy(shifted, truth)
    assert top1_accuracy(shifted, truth, intersect=True) == 1.0

    empty = LabelMask(np.full((1, 4), BACKGROUND))
    with pytest.raises(EmptyMask):
        top1_accuracy(empty, empty)


def test_relabel_region_only_touches_food():
    mask = LabelMask(np.array([[0, 0, BACKGROUND]]))
    fixed = relabel_region(mask, np.array([[False, True, True]]), 2)
    assert fixed.labels.tolist() == [[0, 2, BACKGROUND]]


# --- training and persistence ---

@pytest.fixture
def head_config():
    return MealHeadConfig(max_epochs=3, pixels_per_image=32, batch_size=4)


def test_train_head_leaves_extractor_unchanged(untrained_extractor, three_class_series, three_class_plan,
                                               head_config, tiny_augmentation):
    before = untrained_extractor.checksum()
    head = train_meal_head(untrained_extractor, three_class_series.plates, three_class_plan, head_config,
                           tiny_augmentation)
    assert untrained_extractor.checksum() == before
    assert head.weight.shape == (3, 16)
    assert head.class_names == ("carrots", "mince", "puree")
    assert head.class_textures == TEXTURES
    assert head.metadata["extractor_sha256"] == before

    again = train_meal_head(untrained_extractor, three_class_series.plates, three_class_plan, head_config,
                            tiny_augmentation)
    assert np.array_equal(head.weight, again.weight)


def test_train_head_needs_every_class(untrained_extractor, one_class_series, head_config, tiny_augmentation):
    plan = MealPlan("soup", (portion("pea_soup", 120.0), portion("bread", 80.0)))
    with pytest.raises(MissingClassExample):
        train_meal_head(untrained_extractor, one_class_series.plates, plan, head_config, tiny_augmentation)


def test_head_round_trip(tmp_path):
    head = _head(np.arange(48.0).reshape(3, 16), np.array([0.5, -1.0, 2.0]))
    loaded = load_meal_head(save_meal_head(tmp_path / "head.pntw", head))
    assert np.array_equal(loaded.weight, head.weight)
    assert np.array_equal(loaded.bias, head.bias)
    assert loaded.class_ids == head.class_ids
    assert loaded.class_textures == TEXTURES


def test_load_heads_from_registry(tmp_path):
    registry = HeadRegistry(tmp_path / "heads.json")
    path = save_meal_head(tmp_path / "head_lunch.pntw", _head(np.eye(3, 16)))
    registry.register("lunch", path)

    heads = load_heads(registry, ["lunch"])
    assert heads["lunch"].n_classes == 3
    with pytest.raises(MissingModel):
        load_heads(registry, ["dinner"])
