"""
Intake-error metrics and method-agreement statistics
(ordinary least squares with r², Bland-Altman limits of agreement).
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from errors import DegenerateX, LengthMismatch, NoData, NoOverlap, ZeroReference
from nutrients import DEFAULT_RDA_TABLE, NUTRIENTS, NutrientVector, RdaTable, absolute_to_dv

logger = logging.getLogger(__name__)

LOA_MULTIPLIER = 1.96


def mean_sd(values: Sequence[float]) -> Tuple[float, float]:
    """Mean and sample SD (n−1); SD is 0 for fewer than two values"""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise NoData("no values to summarise")
    sd = float(np.std(values, ddof=1)) if values.size > 1 else 0.0
    return float(np.mean(values)), sd


@dataclass(frozen=True)
class RegressionResult:
    slope: float
    intercept: float
    r_squared: float
    n: int
    constant_y: bool = False


def linear_regression(x: Sequence[float], y: Sequence[float]) -> RegressionResult:
    """OLS of y on x with r² = 1 − SS_res/SS_tot (0 and flagged when y is constant)"""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise LengthMismatch(f"{x.size} x values vs {y.size} y values")
    if x.size < 2:
        raise DegenerateX("regression needs at least two points")
    if np.ptp(x) == 0:
        raise DegenerateX("x is constant")

    fit = stats.linregress(x, y)
    residual = y - (fit.slope * x + fit.intercept)
    ss_res = float(np.sum(residual ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0:
        return RegressionResult(float(fit.slope), float(fit.intercept), 0.0, int(x.size), constant_y=True)
    r_squared = min(max(1.0 - ss_res / ss_tot, 0.0), 1.0)
    return RegressionResult(float(fit.slope), float(fit.intercept), r_squared, int(x.size))


@dataclass(frozen=True)
class BlandAltmanResult:
    bias: float
    sd: float
    loa_lower: float
    loa_upper: float
    n: int
    means: Tuple[float, ...] = field(default=(), repr=False)
    differences: Tuple[float, ...] = field(default=(), repr=False)

    @property
    def zero_within_loa(self) -> bool:
        return self.loa_lower <= 0.0 <= self.loa_upper


def bland_altman(method_a: Sequence[float], method_b: Sequence[float]) -> BlandAltmanResult:
    """Differences a − b: bias μ, sample SD σ, limits μ ± 1.96σ, plus per-point (mean, difference)"""
    a = np.asarray(method_a, dtype=np.float64)
    b = np.asarray(method_b, dtype=np.float64)
    if a.shape != b.shape:
        raise LengthMismatch(f"{a.size} vs {b.size} measurements")
    if a.size < 2:
        raise LengthMismatch("Bland-Altman needs at least two pairs")
    diffs = a - b
    bias = float(np.mean(diffs))
    sd = float(np.std(diffs, ddof=1))
    return BlandAltmanResult(
        bias=bias,
        sd=sd,
        loa_lower=bias - LOA_MULTIPLIER * sd,
        loa_upper=bias + LOA_MULTIPLIER * sd,
        n=int(a.size),
        means=tuple(((a + b) / 2).tolist()),
        differences=tuple(diffs.tolist()),
    )


# --- intake error ---

@dataclass(frozen=True)
class IntakeMetrics:
    """mean/SD pairs of the signed and absolute intake errors (mL) and 3D % errors"""
    signed: Tuple[float, float]
    absolute: Tuple[float, float]
    pct3d_signed: Tuple[float, float]
    pct3d_absolute: Tuple[float, float]
    n: int


def intake_error_metrics(estimates: Sequence[Tuple[float, float, float]]) -> IntakeMetrics:
    """(estimated mL, true mL, reference mL) rows; 3D % = 100·(est − true)/ref"""
    if not estimates:
        raise NoData("no intake estimates")
    rows = np.asarray(estimates, dtype=np.float64).reshape(-1, 3)
    est, true, ref = rows[:, 0], rows[:, 1], rows[:, 2]
    if np.any(ref <= 0):
        raise ZeroReference("reference volume must be > 0")
    signed = est - true
    pct = 100.0 * signed / ref
    return IntakeMetrics(
        signed=mean_sd(signed),
        absolute=mean_sd(np.abs(signed)),
        pct3d_signed=mean_sd(pct),
        pct3d_absolute=mean_sd(np.abs(pct)),
        n=int(rows.shape[0]),
    )


@dataclass(frozen=True)
class IntakeErrorRow:
    """One line of the bulk intake accuracy table"""
    dataset: str
    meal_id: str
    n_classes: int
    n_images: int
    volume_error_abs: Tuple[float, float]
    volume_error_signed: Tuple[float, float]
    intake_error_abs: Tuple[float, float]
    intake_error_signed: Tuple[float, float]
    pct3d_abs: Tuple[float, float]
    pct3d_signed: Tuple[float, float]

    def as_record(self) -> Dict[str, object]:
        record = {"dataset": self.dataset, "meal_id": self.meal_id,
                  "n_classes": self.n_classes, "n_images": self.n_images}
        for name in ("volume_error_abs", "volume_error_signed", "intake_error_abs",
                     "intake_error_signed", "pct3d_abs", "pct3d_signed"):
            mean, sd = getattr(self, name)
            record[f"{name}_mean"] = mean
            record[f"{name}_sd"] = sd
        return record


def intake_error_row(dataset: str, meal_id: str, n_classes: int, n_images: int,
                     volume_pairs: Sequence[Tuple[float, float]],
                     intake_rows: Sequence[Tuple[float, float, float]]) -> IntakeErrorRow:
    """volume_pairs are (estimated, true) food volumes; intake_rows feed intake_error_metrics"""
    volume_errors = np.asarray([est - true for est, true in volume_pairs], dtype=np.float64)
    metrics = intake_error_metrics(intake_rows)
    return IntakeErrorRow(
        dataset=dataset,
        meal_id=meal_id,
        n_classes=n_classes,
        n_images=n_images,
        volume_error_abs=mean_sd(np.abs(volume_errors)),
        volume_error_signed=mean_sd(volume_errors),
        intake_error_abs=metrics.absolute,
        intake_error_signed=metrics.signed,
        pct3d_abs=metrics.pct3d_absolute,
        pct3d_signed=metrics.pct3d_signed,
    )


# --- nutrient agreement ---

def mass_method_fraction(reference_mass: float, after_mass: float) -> float:
    """Weighed-food intake fraction (m_ref − m_after) / m_ref"""
    if reference_mass <= 0:
        raise ZeroReference("reference mass must be > 0")
    return (reference_mass - after_mass) / reference_mass


@dataclass(frozen=True)
class AgreementReport:
    nutrient: str
    regression: Optional[RegressionResult]
    bland_altman: BlandAltmanResult
    volume_values: Tuple[float, ...] = field(default=(), repr=False)
    mass_values: Tuple[float, ...] = field(default=(), repr=False)

    def as_record(self) -> Dict[str, object]:
        reg = self.regression
        ba = self.bland_altman
        return {
            "nutrient": self.nutrient,
            "n": ba.n,
            "slope": reg.slope if reg else math.nan,
            "intercept": reg.intercept if reg else math.nan,
            "r_squared": reg.r_squared if reg else math.nan,
            "constant_y": reg.constant_y if reg else False,
            "bias": ba.bias,
            "sd": ba.sd,
            "loa_lower": ba.loa_lower,
            "loa_upper": ba.loa_upper,
            "zero_within_loa": ba.zero_within_loa,
        }


def _pairs(volume: Sequence[NutrientVector], mass: Sequence[NutrientVector], nutrient: str):
    return [(v.get(nutrient), m.get(nutrient)) for v, m in zip(volume, mass)
            if v.get(nutrient) is not None and m.get(nutrient) is not None]


def nutrient_agreement(volume_intakes: Sequence[NutrientVector], mass_intakes: Sequence[NutrientVector],
                       strict: bool = True) -> Dict[str, AgreementReport]:
    """
    Per nutrient: regression of volume-method on mass-method intake and
    Bland-Altman of (volume − mass). Absent values drop out pairwise.
    strict raises NoOverlap for a nutrient with no pair; otherwise it is skipped.
    """
    if len(volume_intakes) != len(mass_intakes):
        raise LengthMismatch(f"{len(volume_intakes)} volume vs {len(mass_intakes)} mass plates")

    reports = {}
    for nutrient in NUTRIENTS:
        pairs = _pairs(volume_intakes, mass_intakes, nutrient)
        if not pairs:
            if strict:
                raise NoOverlap(f"{nutrient} has no values in both methods")
            continue
        if len(pairs) < 2:
            logger.warning("Skipping %s: only one plate with data", nutrient)
            continue
        vol = [p[0] for p in pairs]
        mass = [p[1] for p in pairs]
        try:
            regression = linear_regression(mass, vol)
        except DegenerateX:
            regression = None
        reports[nutrient] = AgreementReport(nutrient, regression, bland_altman(vol, mass),
                                            tuple(vol), tuple(mass))
    return reports


def nutrient_accuracy(volume_intakes: Sequence[NutrientVector], mass_intakes: Sequence[NutrientVector],
                      portion_contents: Sequence[NutrientVector],
                      table: RdaTable = DEFAULT_RDA_TABLE) -> List[Dict[str, object]]:
    """
    Per nutrient mean ± SD of |volume − mass| intake with two % error
    normalisations: by the plate's full-portion content and by daily value.
    """
    if not (len(volume_intakes) == len(mass_intakes) == len(portion_contents)):
        raise LengthMismatch("volume, mass and portion lists must align")

    rows = []
    for nutrient in NUTRIENTS:
        diffs, pct_portion = [], []
        for v, m, p in zip(volume_intakes, mass_intakes, portion_contents):
            if v.get(nutrient) is None or m.get(nutrient) is None:
                continue
            diff = v.get(nutrient) - m.get(nutrient)
            diffs.append(diff)
            content = p.get(nutrient)
            if content:
                pct_portion.append(100.0 * abs(diff) / content)
        if not diffs:
            continue
        abs_diffs = np.abs(diffs)
        mean_abs, sd_abs = mean_sd(abs_diffs)
        row = {
            "nutrient": nutrient,
            "n": len(diffs),
            "abs_error_mean": mean_abs,
            "abs_error_sd": sd_abs,
            "signed_error_mean": mean_sd(diffs)[0],
            "pct_of_portion_mean": mean_sd(pct_portion)[0] if pct_portion else math.nan,
            "pct_of_portion_sd": mean_sd(pct_portion)[1] if pct_portion else math.nan,
            "pct_of_daily_value_mean": math.nan,
            "pct_of_daily_value_sd": math.nan,
        }
        if table.has_basis(nutrient):
            row["pct_of_daily_value_mean"], row["pct_of_daily_value_sd"] = mean_sd(
                [absolute_to_dv(d, nutrient, table) for d in abs_diffs])
        rows.append(row)
    return rows
