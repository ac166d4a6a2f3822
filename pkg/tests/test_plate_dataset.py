import dataclasses
import json
import math
from pathlib import Path

import imageio.v3 as iio
import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings as h_settings, strategies as st

from conftest import LEVELS, portion
from depth_volume import BACKGROUND, CalibrationProfile, integrate_volume
from errors import (
    DataError,
    ManifestInvalid,
    MissingFile,
    NonPositiveDepth,
    OverlapInfeasible,
    ParseError,
    UnknownClass,
)
from plate_dataset import (
    FoodShape,
    GeneratorSettings,
    MealPlan,
    RgbdPlate,
    generate_plate_series,
    generate_study,
    group_records,
    load_manifest,
    load_study_plan,
    read_manifest_records,
    simulate_consumption,
    write_manifest,
)

STUDY_PLAN = Path(__file__).resolve().parent.parent / "data" / "study_plan.json"


def _class_volume(plate, class_id, cal):
    return integrate_volume(plate.depth, plate.class_labels == class_id, cal)


# --- records ---

def test_plate_validates_grids():
    color = np.zeros((4, 4, 3), dtype=np.uint8)
    mask = np.zeros((4, 4), dtype=bool)
    with pytest.raises(NonPositiveDepth):
        RgbdPlate(color=color, depth=np.zeros((4, 4)), food_mask=mask)
    labels = np.zeros((4, 4), dtype=int)
    with pytest.raises(DataError):
        RgbdPlate(color=color, depth=np.full((4, 4), 40.0), food_mask=mask, class_labels=labels)


def test_plate_grids_are_read_only(three_class_series):
    plate = three_class_series.reference
    with pytest.raises(ValueError):
        plate.depth[0, 0] = 1.0


def test_meal_plan_classes():
    plan = MealPlan("m", (portion("a", 1.0), portion("b", 2.0)))
    assert plan.class_id("b") == 1
    with pytest.raises(UnknownClass):
        plan.class_id("c")
    with pytest.raises(DataError):
        MealPlan("m", (portion("a", 1.0), portion("a", 2.0)))


# --- generator ---

def test_series_structure(three_class_series):
    plates = three_class_series.plates
    assert len(plates) == len(LEVELS)
    assert [p.intake_index for p in plates] == list(range(len(LEVELS)))
    assert [p.intake_level for p in plates] == pytest.approx(LEVELS)
    assert plates[-1].food_mask.sum() == 0
    for earlier, later in zip(plates, plates[1:]):
        for c in range(3):
            assert later.true_volume[c] <= earlier.true_volume[c]
            assert later.true_mass[c] == pytest.approx(later.true_volume[c] * 1.2)
    for plate in plates:
        assert np.array_equal(plate.class_labels != BACKGROUND, plate.food_mask)


def test_generator_is_seed_deterministic(three_class_plan, three_class_shapes, cal, small_settings):
    a = generate_plate_series(three_class_plan, three_class_shapes, LEVELS, 11, cal, small_settings)
    b = generate_plate_series(three_class_plan, three_class_shapes, LEVELS, 11, cal, small_settings)
    for pa, pb in zip(a.plates, b.plates):
        assert np.array_equal(pa.depth, pb.depth)
        assert np.array_equal(pa.color, pb.color)
        assert np.array_equal(pa.class_labels, pb.class_labels)


def test_reference_volume_matches_geometry():
    cal = CalibrationProfile()
    settings = GeneratorSettings(noise_sigma_cm=0.0)
    shape = FoodShape(profile="slab", radius_cm=math.sqrt(100 / math.pi), height_cm=1.0)
    series = generate_plate_series(MealPlan("slab", (portion("s", 10.0),)), [shape], [0.0, 0.5], 0, cal, settings)

    assert series.plates[1].true_volume[0] == pytest.approx(50.0)
    measured = integrate_volume(series.reference.depth, series.reference.food_mask, cal)
    assert measured == pytest.approx(100.0, rel=0.02)


def test_toast_overestimates_volume(cal, small_settings):
    shape = FoodShape(profile="toast", radius_cm=1.0, height_cm=0.3, tilt_deg=10.0, lift_cm=0.4)
    series = generate_plate_series(MealPlan("toast", (portion("toast", 80.0),)), [shape], [0.0], 0, cal,
                                   small_settings)
    measured = integrate_volume(series.reference.depth, series.reference.food_mask, cal)
    assert measured > 1.5 * shape.analytic_volume()


def test_items_that_cannot_fit_are_rejected(cal, small_settings):
    plan = MealPlan("big", tuple(portion(f"f{i}", 10.0) for i in range(3)))
    shapes = [FoodShape(radius_cm=2.0, height_cm=1.0)] * 3
    with pytest.raises(OverlapInfeasible):
        generate_plate_series(plan, shapes, [0.0], 0, cal, small_settings)


@pytest.mark.parametrize("levels", [[0.25, 0.5], [0.0, 0.5, 0.25], [0.0, 1.5]])
def test_bad_levels(one_class_plan, one_class_shapes, cal, small_settings, levels):
    with pytest.raises(DataError):
        generate_plate_series(one_class_plan, one_class_shapes, levels, 0, cal, small_settings)


def test_staggered_schedule_stays_monotone(three_class_plan, three_class_shapes, cal):
    settings = GeneratorSettings(image_size=72, plate_radius_cm=2.9, noise_sigma_cm=0.05, schedule="staggered")
    series = generate_plate_series(three_class_plan, three_class_shapes, LEVELS, 5, cal, settings)
    assert series.reference.intake_level == 0.0
    levels = [p.intake_level for p in series.plates]
    assert all(0.0 <= level <= 1.0 for level in levels)


# --- consumption ---

@h_settings(max_examples=20, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(fraction=st.floats(0.05, 0.95), angle=st.floats(0.0, 2 * math.pi))
def test_consumption_removes_exact_volume(three_class_series, fraction, angle):
    cal = CalibrationProfile()
    plate = three_class_series.reference
    before = _class_volume(plate, 1, cal)
    after = simulate_consumption(plate, 1, fraction, cal, angle)
    assert _class_volume(after, 1, cal) == pytest.approx((1 - fraction) * before, rel=1e-9)
    assert _class_volume(after, 0, cal) == _class_volume(plate, 0, cal)


def test_consumption_edges(three_class_series, cal):
    plate = three_class_series.reference
    assert simulate_consumption(plate, 0, 0.0, cal) is plate
    emptied = simulate_consumption(plate, 0, 1.0, cal)
    assert 0 not in emptied.class_ids()
    assert emptied.depth[plate.class_labels == 0] == pytest.approx(cal.table_distance_cm)
    with pytest.raises(DataError):
        simulate_consumption(plate, 0, 1.5, cal)
    with pytest.raises(UnknownClass):
        simulate_consumption(emptied, 0, 0.5, cal)


# --- study plans ---

def test_bundled_study_plan_loads():
    studies = load_study_plan(STUDY_PLAN)
    assert len(studies) == 5
    by_id = {s.plan.meal_id: s for s in studies}
    assert by_id["pureed_dinner"].plan.texture_filter == "pureed"
    assert by_id["minced_lunch"].plan.dataset == "modified_texture"
    for study in studies:
        assert len(study.shapes) == study.plan.n_classes


def test_study_plan_rejects_unknown_food(tmp_path):
    (tmp_path / "foods.csv").write_text((STUDY_PLAN.parent / "foods.csv").read_text(encoding="utf-8"),
                                        encoding="utf-8")
    plan = {"nutrient_table": "foods.csv",
            "meals": [{"meal_id": "x", "items": [{"food": "caviar", "radius_cm": 1.0, "height_cm": 1.0}]}]}
    (tmp_path / "plan.json").write_text(json.dumps(plan), encoding="utf-8")
    with pytest.raises(UnknownClass):
        load_study_plan(tmp_path / "plan.json")


@pytest.mark.slow
def test_generate_study_is_reproducible(cal):
    study = dataclasses.replace(load_study_plan(STUDY_PLAN)[0], series_count=1)
    settings = GeneratorSettings()
    a = generate_study([study], 42, cal, settings)
    b = generate_study([study], 42, cal, settings)
    assert [s.series_id for s in a] == ["breakfast-000"]
    for pa, pb in zip(a[0].plates, b[0].plates):
        assert np.array_equal(pa.depth, pb.depth)


# --- manifest ---

def test_manifest_round_trip_is_exact(three_class_series, tmp_path):
    manifest = write_manifest([three_class_series], tmp_path)
    (loaded,) = load_manifest(manifest)
    assert loaded.series_id == "lunch-000"
    for original, reread in zip(three_class_series.plates, loaded.plates):
        assert np.array_equal(original.depth, reread.depth)
        assert np.array_equal(original.color, reread.color)
        assert np.array_equal(original.food_mask, reread.food_mask)
        assert np.array_equal(original.class_labels, reread.class_labels)
        assert reread.true_mass == original.true_mass
        assert reread.plate_region == original.plate_region


def _rewrite(manifest, edit):
    lines = manifest.read_text(encoding="utf-8").splitlines()
    records = [json.loads(line) for line in lines]
    edit(records)
    manifest.write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")


def test_manifest_parse_errors_carry_line(three_class_series, tmp_path):
    manifest = write_manifest([three_class_series], tmp_path)
    _rewrite(manifest, lambda records: records[2].pop("mass_g"))
    with pytest.raises(ParseError) as info:
        read_manifest_records(manifest)
    assert info.value.line == 3


def test_manifest_rejects_repeated_index(three_class_series, tmp_path):
    manifest = write_manifest([three_class_series], tmp_path)
    _rewrite(manifest, lambda records: records[1].update(intake_index=0))
    with pytest.raises(ManifestInvalid):
        group_records(read_manifest_records(manifest))


def test_manifest_missing_image(three_class_series, tmp_path):
    manifest = write_manifest([three_class_series], tmp_path)
    (tmp_path / "images" / "lunch-000_02_depth.png").unlink()
    with pytest.raises(MissingFile):
        load_manifest(manifest)


def test_manifest_rejects_grey_mask(three_class_series, tmp_path):
    manifest = write_manifest([three_class_series], tmp_path)
    path = tmp_path / "images" / "lunch-000_00_mask.png"
    mask = iio.imread(path)
    mask[0, 0] = 128
    iio.imwrite(path, mask)
    with pytest.raises(ManifestInvalid):
        load_manifest(manifest)
