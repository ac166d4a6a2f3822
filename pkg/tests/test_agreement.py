import math

import numpy as np
import pytest
from hypothesis import given, settings as h_settings, strategies as st

from agreement import (
    bland_altman,
    intake_error_metrics,
    intake_error_row,
    linear_regression,
    mass_method_fraction,
    mean_sd,
    nutrient_accuracy,
    nutrient_agreement,
)
from errors import DegenerateX, LengthMismatch, NoData, NoOverlap, ZeroReference
from nutrients import NutrientVector

_values = st.floats(min_value=-1e3, max_value=1e3, allow_nan=False, allow_infinity=False)


def test_mean_sd():
    assert mean_sd([2.0, 4.0]) == pytest.approx((3.0, math.sqrt(2.0)))
    assert mean_sd([5.0]) == (5.0, 0.0)
    with pytest.raises(NoData):
        mean_sd([])


# --- regression ---

def test_regression_on_a_line():
    fit = linear_regression([1, 2, 3, 4], [3, 5, 7, 9])
    assert (fit.slope, fit.intercept, fit.r_squared) == pytest.approx((2.0, 1.0, 1.0))
    assert not fit.constant_y


def test_regression_constant_y():
    fit = linear_regression([1, 2, 3], [4, 4, 4])
    assert fit.slope == pytest.approx(0.0)
    assert fit.r_squared == 0.0
    assert fit.constant_y


@pytest.mark.parametrize("x, y, error", [
    ([1, 1, 1], [1, 2, 3], DegenerateX),
    ([1], [1], DegenerateX),
    ([1, 2], [1, 2, 3], LengthMismatch),
])
def test_regression_rejects(x, y, error):
    with pytest.raises(error):
        linear_regression(x, y)


@h_settings(max_examples=60, deadline=None)
@given(xs=st.lists(_values, min_size=3, max_size=12, unique=True), data=st.data())
def test_r_squared_in_unit_interval(xs, data):
    ys = data.draw(st.lists(_values, min_size=len(xs), max_size=len(xs)))
    r2 = linear_regression(xs, ys).r_squared
    assert 0.0 <= r2 <= 1.0


@h_settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2 ** 16), n=st.integers(3, 30))
def test_regression_matches_normal_equations(seed, n):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 100.0, n)
    y = 0.9 * x + 3.0 + rng.normal(0.0, 5.0, n)
    design = np.column_stack([np.ones(n), x])
    intercept, slope = np.linalg.solve(design.T @ design, design.T @ y)
    residual = y - design @ np.array([intercept, slope])
    r2 = 1.0 - np.sum(residual ** 2) / np.sum((y - y.mean()) ** 2)

    fit = linear_regression(x, y)
    assert (fit.slope, fit.intercept) == pytest.approx((slope, intercept), rel=1e-8, abs=1e-8)
    assert fit.r_squared == pytest.approx(max(r2, 0.0), abs=1e-10)


@h_settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2 ** 16),
       x_scale=st.sampled_from([-3.0, 0.5, 7.0]), y_scale=st.sampled_from([-2.0, 0.1, 40.0]),
       shift=st.floats(-50.0, 50.0))
def test_r_squared_ignores_affine_rescaling(seed, x_scale, y_scale, shift):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 10.0, 15)
    y = 2.0 * x + rng.normal(0.0, 3.0, 15)
    base = linear_regression(x, y).r_squared
    assert linear_regression(x_scale * x + shift, y_scale * y - shift).r_squared == pytest.approx(base, abs=1e-9)


# --- Bland-Altman ---

def test_bland_altman_example():
    result = bland_altman([12.0, 8.0], [10.0, 10.0])
    assert result.bias == 0.0
    assert result.sd == pytest.approx(2 * math.sqrt(2))
    assert (result.loa_lower, result.loa_upper) == pytest.approx((-5.5437, 5.5437), abs=1e-4)
    assert result.zero_within_loa
    assert result.means == (11.0, 9.0)
    assert result.differences == (2.0, -2.0)


@h_settings(max_examples=60, deadline=None)
@given(pairs=st.lists(st.tuples(_values, _values), min_size=2, max_size=20))
def test_limits_are_symmetric_about_bias(pairs):
    a, b = zip(*pairs)
    result = bland_altman(a, b)
    assert result.loa_upper - result.bias == pytest.approx(result.bias - result.loa_lower, abs=1e-6)
    assert result.loa_lower <= result.bias <= result.loa_upper


@h_settings(max_examples=40, deadline=None)
@given(pairs=st.lists(st.tuples(_values, _values), min_size=2, max_size=20))
def test_bland_altman_matches_direct_formulas(pairs):
    a, b = zip(*pairs)
    diffs = [x - y for x, y in pairs]
    bias = math.fsum(diffs) / len(diffs)
    sd = math.sqrt(math.fsum((d - bias) ** 2 for d in diffs) / (len(diffs) - 1))
    result = bland_altman(a, b)
    assert result.bias == pytest.approx(bias, rel=1e-9, abs=1e-9)
    assert result.sd == pytest.approx(sd, rel=1e-9, abs=1e-9)
    assert result.loa_upper == pytest.approx(bias + 1.96 * sd, rel=1e-9, abs=1e-6)


@h_settings(max_examples=40, deadline=None)
@given(pairs=st.lists(st.tuples(_values, _values), min_size=2, max_size=20))
def test_swapping_methods_negates_bias(pairs):
    a, b = zip(*pairs)
    forward, backward = bland_altman(a, b), bland_altman(b, a)
    assert backward.bias == pytest.approx(-forward.bias, abs=1e-9)
    assert backward.sd == pytest.approx(forward.sd, abs=1e-9)
    assert (backward.loa_lower, backward.loa_upper) == pytest.approx((-forward.loa_upper, -forward.loa_lower), abs=1e-6)


def test_bland_altman_needs_pairs():
    with pytest.raises(LengthMismatch):
        bland_altman([1.0], [1.0])
    with pytest.raises(LengthMismatch):
        bland_altman([1.0, 2.0], [1.0])


# --- intake error ---

def test_intake_error_single_row():
    metrics = intake_error_metrics([(90.0, 100.0, 200.0)])
    assert metrics.signed == (-10.0, 0.0)
    assert metrics.absolute == (10.0, 0.0)
    assert metrics.pct3d_signed == (-5.0, 0.0)
    assert metrics.pct3d_absolute == (5.0, 0.0)


def test_intake_error_guards():
    with pytest.raises(NoData):
        intake_error_metrics([])
    with pytest.raises(ZeroReference):
        intake_error_metrics([(1.0, 1.0, 0.0)])


def test_intake_error_row_record():
    row = intake_error_row("synthetic", "lunch", 3, 2, [(101.0, 100.0), (97.0, 100.0)],
                           [(48.0, 50.0, 100.0), (52.0, 50.0, 100.0)])
    record = row.as_record()
    assert record["volume_error_signed_mean"] == pytest.approx(-1.0)
    assert record["volume_error_abs_mean"] == pytest.approx(2.0)
    assert record["intake_error_signed_mean"] == pytest.approx(0.0)
    assert record["intake_error_abs_mean"] == pytest.approx(2.0)
    assert record["pct3d_abs_sd"] == pytest.approx(0.0)
    assert record["n_images"] == 2


def test_mass_method_fraction():
    assert mass_method_fraction(200.0, 50.0) == 0.75
    with pytest.raises(ZeroReference):
        mass_method_fraction(0.0, 0.0)


# --- nutrients ---

def test_agreement_skips_absent_values():
    vol = [NutrientVector(calories=10, vitamin_d=None), NutrientVector(calories=20, vitamin_d=None),
           NutrientVector(calories=31, vitamin_d=None)]
    mass = [NutrientVector(calories=11, vitamin_d=None), NutrientVector(calories=19, vitamin_d=None),
            NutrientVector(calories=30, vitamin_d=None)]
    with pytest.raises(NoOverlap):
        nutrient_agreement(vol, mass, strict=True)

    reports = nutrient_agreement(vol, mass, strict=False)
    assert "vitamin_d" not in reports
    calories = reports["calories"]
    assert calories.bland_altman.n == 3
    assert calories.bland_altman.bias == pytest.approx(1 / 3)
    assert calories.regression.r_squared > 0.98
    # every other nutrient is 0 on both sides: constant x, no regression
    assert reports["fat"].regression is None
    assert reports["fat"].as_record()["zero_within_loa"]


def test_agreement_length_mismatch():
    with pytest.raises(LengthMismatch):
        nutrient_agreement([NutrientVector()], [])


def test_nutrient_accuracy_normalisations():
    vol = [NutrientVector(vitamin_c=10.0, calories=100.0), NutrientVector(vitamin_c=20.0, calories=50.0)]
    mass = [NutrientVector(vitamin_c=12.0, calories=100.0), NutrientVector(vitamin_c=18.0, calories=60.0)]
    portions = [NutrientVector(vitamin_c=40.0, calories=200.0)] * 2
    rows = {row["nutrient"]: row for row in nutrient_accuracy(vol, mass, portions)}

    vitamin_c = rows["vitamin_c"]
    assert vitamin_c["abs_error_mean"] == pytest.approx(2.0)
    assert vitamin_c["abs_error_sd"] == pytest.approx(0.0)
    assert vitamin_c["signed_error_mean"] == pytest.approx(0.0)
    assert vitamin_c["pct_of_portion_mean"] == pytest.approx(5.0)
    assert vitamin_c["pct_of_daily_value_mean"] == pytest.approx(200.0 / 82.5)

    calories = rows["calories"]
    assert calories["pct_of_portion_mean"] == pytest.approx(2.5)
    assert np.isnan(calories["pct_of_daily_value_mean"])
    # zero portion content has no portion-relative error
    assert np.isnan(rows["fat"]["pct_of_portion_mean"])
