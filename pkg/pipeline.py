"""
Intake evaluation pipeline: segment, classify, integrate volumes, compare each
plate against its series' reference portion and turn the consumed fractions
into nutrient intakes by the volume and the weighed-mass methods.
"""

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from agreement import mass_method_fraction
from autoencoder import FeatureExtractor, load_feature_extractor
from config import PipelineConfig
from depth_volume import (
    BACKGROUND,
    SimilarityTransform,
    VolumeEstimate,
    bulk_fraction,
    estimate_volumes,
    fit_similarity_transform,
    pairwise_intake_changes,
    relative_intake,
    warp_to_depth,
)
from errors import EmptyMask, ManifestInvalid, TrackerError, UnknownMeal
from meal_classifier import LabelMask, MealHead, classify_pixels, load_heads, select_head, top1_accuracy
from model_store import HeadRegistry
from nutrients import NutrientVector, scale_portion, sum_plate
from plate_dataset import (
    ManifestRecord,
    MealPlan,
    PlateSeries,
    RgbdPlate,
    group_records,
    load_series,
    load_study_plan,
    read_manifest_records,
)
from segmentation import segment_plate

logger = logging.getLogger(__name__)

STAGES = ("segmentation", "classification", "volume_nutrients")


@dataclass(frozen=True, eq=False)
class PlateOutcome:
    """Everything measured on one plate; per-class dicts are keyed by meal class id"""
    dataset: str
    meal_id: str
    series_id: str
    intake_index: int
    intake_level: float
    n_classes: int
    iou: float
    flagged: bool
    top1: float
    clamped_pixels: int
    bulk_fraction: float
    estimated_fraction: Dict[int, float]
    estimated_volume: Dict[int, float]
    true_volume: Dict[int, float]
    reference_volume: Dict[int, float]
    estimated_intake: Dict[int, float]
    true_intake: Dict[int, float]
    volume_nutrients: NutrientVector
    mass_nutrients: NutrientVector
    portion_content: NutrientVector
    timing: Dict[str, float] = field(default_factory=dict)

    @property
    def key(self) -> str:
        return f"{self.series_id}/{self.intake_index}"

    @property
    def is_reference(self) -> bool:
        return self.intake_index == 0

    def intake_rows(self) -> List[Tuple[float, float, float]]:
        """(estimated mL, true mL, reference mL) per class"""
        return [(self.estimated_intake[c], self.true_intake[c], self.reference_volume[c])
                for c in sorted(self.estimated_intake)]

    def volume_pairs(self) -> List[Tuple[float, float]]:
        return [(self.estimated_volume[c], self.true_volume[c]) for c in sorted(self.estimated_volume)]

    def as_record(self) -> Dict[str, Any]:
        record = {
            "dataset": self.dataset,
            "meal_id": self.meal_id,
            "series_id": self.series_id,
            "intake_index": self.intake_index,
            "intake_level": self.intake_level,
            "n_classes": self.n_classes,
            "iou": self.iou,
            "flagged": self.flagged,
            "top1": self.top1,
            "clamped_pixels": self.clamped_pixels,
            "bulk_fraction": self.bulk_fraction,
            "est_volume_ml": math.fsum(self.estimated_volume.values()),
            "true_volume_ml": math.fsum(self.true_volume.values()),
            "est_intake_ml": math.fsum(self.estimated_intake.values()),
            "true_intake_ml": math.fsum(self.true_intake.values()),
        }
        for prefix, vector in (("vol", self.volume_nutrients), ("mass", self.mass_nutrients)):
            for nutrient, value in vector.as_dict().items():
                record[f"{prefix}_{nutrient}"] = math.nan if value is None else value
        return record


@dataclass
class EvaluationResult:
    plates: List[PlateOutcome] = field(default_factory=list)
    errors: List[Dict[str, Any]] = field(default_factory=list)
    pairwise: List[Dict[str, Any]] = field(default_factory=list)
    series_count: int = 0

    @property
    def success(self) -> bool:
        return not self.errors

    def after_plates(self) -> List[PlateOutcome]:
        return [p for p in self.plates if not p.is_reference]

    def stage_means(self) -> Dict[str, float]:
        """Mean wall-clock seconds per plate for each stage"""
        means = {}
        for stage in STAGES:
            values = [p.timing[stage] for p in self.plates if stage in p.timing]
            means[stage] = math.fsum(values) / len(values) if values else math.nan
        return means


def _error_row(series_id: str, intake_index: Optional[int], error: Exception) -> Dict[str, Any]:
    return {
        "series_id": series_id,
        "intake_index": -1 if intake_index is None else intake_index,
        "error": type(error).__name__,
        "message": str(error),
    }


def _true_mass(plate: RgbdPlate, class_id: int) -> float:
    if class_id not in plate.true_mass:
        raise ManifestInvalid(f"{plate.series_id}/{plate.intake_index}: no weighed mass for class {class_id}")
    return plate.true_mass[class_id]


def _true_volume(plate: RgbdPlate, plan: MealPlan, class_id: int) -> float:
    """Recorded volume, else weighed mass over the portion's density"""
    if class_id in plate.true_volume:
        return plate.true_volume[class_id]
    return _true_mass(plate, class_id) / plan.classes[class_id].density


def registration_transform(points: Optional[Sequence[Tuple[float, float, float, float]]]
                           ) -> Optional[SimilarityTransform]:
    """Colour-to-depth similarity from (x_color, y_color, x_depth, y_depth) control points"""
    if not points:
        return None
    points = np.asarray(points, dtype=np.float64)
    transform = fit_similarity_transform(points[:, :2], points[:, 2:])
    logger.info("Colour-to-depth registration: scale %.4f, angle %.4f rad, rms %.3f px",
                transform.scale, transform.angle, transform.rms)
    return transform


class IntakeEvaluator:
    """Runs the intake pipeline over a manifest, one isolated job per series"""

    def __init__(self, config: PipelineConfig, plans: Mapping[str, MealPlan],
                 extractor: FeatureExtractor, heads: Mapping[str, MealHead]):
        self.config = config
        self.plans = dict(plans)
        self.extractor = extractor
        self.heads = dict(heads)
        self.transform = registration_transform(config.evaluation.registration_points)

    @classmethod
    def from_config(cls, config: PipelineConfig, meal_ids: Sequence[str]) -> "IntakeEvaluator":
        """Load study plan, frozen extractor and the heads of every meal to evaluate"""
        plans = {study.plan.meal_id: study.plan for study in load_study_plan(config.paths.study_plan)}
        unknown = sorted(set(meal_ids) - set(plans))
        if unknown:
            raise UnknownMeal(f"meals not in the study plan: {unknown}")
        extractor = load_feature_extractor(config.paths.autoencoder)
        heads = load_heads(HeadRegistry(config.paths.head_registry), sorted(set(meal_ids)))
        return cls(config, plans, extractor, heads)

    # --- per plate ---

    def _texture(self, plan: MealPlan) -> Optional[str]:
        return self.config.evaluation.texture_for(plan.meal_id) or plan.texture_filter

    def _predict_labels(self, plate: RgbdPlate, head: MealHead, timing: Dict[str, float]):
        start = time.perf_counter()
        segmentation = segment_plate(plate, self.config.evaluation.mask_source, self.config.segmenter)
        timing["segmentation"] = time.perf_counter() - start

        start = time.perf_counter()
        predicted = classify_pixels(self.extractor, head, plate, segmentation.mask)
        if self.transform is not None:
            predicted = LabelMask(warp_to_depth(predicted.labels, self.transform, plate.shape,
                                                fill=BACKGROUND))
        timing["classification"] = time.perf_counter() - start
        return segmentation, predicted

    def _score_top1(self, predicted: LabelMask, plate: RgbdPlate) -> float:
        if plate.class_labels is None:
            return math.nan
        try:
            return top1_accuracy(predicted, LabelMask.from_plate(plate), intersect=True)
        except EmptyMask:
            return math.nan

    def _outcome(self, plate: RgbdPlate, plan: MealPlan, class_ids: Sequence[int],
                 reference: RgbdPlate, reference_estimate: VolumeEstimate, estimate: VolumeEstimate,
                 segmentation, top1: float, timing: Dict[str, float]) -> PlateOutcome:
        start = time.perf_counter()
        fractions, intake, truth, volume_items, mass_items = {}, {}, {}, [], []
        reference_volume: Dict[int, float] = {}
        true_volume: Dict[int, float] = {}
        for c in class_ids:
            portion = plan.classes[c].nutrients_per_portion
            reference_volume[c] = _true_volume(reference, plan, c)
            true_volume[c] = _true_volume(plate, plan, c)
            fractions[c] = relative_intake(reference_estimate, estimate, c)
            intake[c] = fractions[c] * reference_volume[c]
            truth[c] = reference_volume[c] - true_volume[c]
            volume_items.append(scale_portion(portion, fractions[c]))
            mass_items.append(scale_portion(
                portion, mass_method_fraction(_true_mass(reference, c), _true_mass(plate, c))))

        outcome = PlateOutcome(
            dataset=plan.dataset,
            meal_id=plan.meal_id,
            series_id=plate.series_id,
            intake_index=plate.intake_index,
            intake_level=plate.intake_level,
            n_classes=len(class_ids),
            iou=segmentation.iou,
            flagged=segmentation.flagged,
            top1=top1,
            clamped_pixels=estimate.clamped_pixels,
            bulk_fraction=bulk_fraction(reference_estimate, estimate),
            estimated_fraction=fractions,
            estimated_volume={c: estimate.volume(c) for c in class_ids},
            true_volume=true_volume,
            reference_volume=reference_volume,
            estimated_intake=intake,
            true_intake=truth,
            volume_nutrients=sum_plate(volume_items),
            mass_nutrients=sum_plate(mass_items),
            portion_content=sum_plate([plan.classes[c].nutrients_per_portion for c in class_ids]),
            timing=timing,
        )
        timing["volume_nutrients"] = time.perf_counter() - start
        return outcome

    # --- per series ---

    def evaluate_series(self, records: Sequence[ManifestRecord]) -> Dict[str, Any]:
        """One series, never raising: failures come back as error rows"""
        series_id = records[0].series_id
        result: Dict[str, Any] = {"success": False, "series_id": series_id,
                                  "plates": [], "errors": [], "pairwise": []}
        try:
            series = load_series(records)
            plan = self.plans.get(series.meal_id)
            if plan is None:
                raise UnknownMeal(f"meal '{series.meal_id}' is not in the study plan")
            head = select_head(plan.meal_id, self._texture(plan), self.heads)
        except TrackerError as e:
            logger.error("Series %s skipped: %s", series_id, e)
            result["errors"].append(_error_row(series_id, None, e))
            result["message"] = f"❌ {series_id}: {e}"
            return result

        return self._evaluate_loaded(series, plan, head, result)

    def _evaluate_loaded(self, series: PlateSeries, plan: MealPlan, head: MealHead,
                         result: Dict[str, Any]) -> Dict[str, Any]:
        class_ids = list(head.class_ids)
        reference = series.reference
        cal = self.config.calibration
        estimates: List[Optional[VolumeEstimate]] = []
        reference_estimate = None

        for plate in series.plates:
            timing: Dict[str, float] = {}
            try:
                plate.check_calibration(cal)
                segmentation, predicted = self._predict_labels(plate, head, timing)
                # reference portions are scored with their hand labels when present
                labels = (plate.class_labels if plate is reference and plate.class_labels is not None
                          else predicted.labels)
                estimate = estimate_volumes(plate.depth, labels, cal, plan.n_classes)
                if plate is reference:
                    reference_estimate = estimate
                if reference_estimate is None:
                    raise EmptyMask(f"series {series.series_id} has no usable reference plate")
                outcome = self._outcome(plate, plan, class_ids, reference, reference_estimate,
                                        estimate, segmentation, self._score_top1(predicted, plate), timing)
            except TrackerError as e:
                logger.error("Plate %s/%d failed: %s", series.series_id, plate.intake_index, e)
                result["errors"].append(_error_row(series.series_id, plate.intake_index, e))
                estimates.append(None)
                if plate is reference:
                    break
                continue
            estimates.append(estimate)
            result["plates"].append(outcome)

        if reference_estimate is not None and all(e is not None for e in estimates):
            result["pairwise"] = self._pairwise_rows(series, class_ids, estimates)

        result["success"] = not result["errors"]
        result["message"] = (f"✅ {series.series_id}: {len(result['plates'])} plates" if result["success"]
                             else f"⚠️ {series.series_id}: {len(result['errors'])} failed plates")
        return result

    def _pairwise_rows(self, series: PlateSeries, class_ids: Sequence[int],
                       estimates: Sequence[VolumeEstimate]) -> List[Dict[str, Any]]:
        rows = []
        scopes: List[Tuple[str, Optional[int]]] = [("plate", None)] + [(str(c), c) for c in class_ids]
        for scope, class_id in scopes:
            try:
                changes = pairwise_intake_changes(estimates, class_id)
            except TrackerError as e:
                logger.debug("No pairwise changes for %s scope %s: %s", series.series_id, scope, e)
                continue
            for i, j, change in changes:
                rows.append({
                    "series_id": series.series_id,
                    "scope": scope,
                    "from_index": series.plates[i].intake_index,
                    "to_index": series.plates[j].intake_index,
                    "estimated_change": change,
                    "true_change": series.plates[j].intake_level - series.plates[i].intake_level,
                })
        return rows

    # --- whole manifest ---

    def evaluate_records(self, records: Sequence[ManifestRecord]) -> EvaluationResult:
        """Per-series jobs on a bounded pool, gathered in manifest order"""
        groups = list(group_records(records).values())
        threads = self.config.evaluation.threads
        if threads > 1 and len(groups) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                outcomes = list(pool.map(self.evaluate_series, groups))
        else:
            outcomes = [self.evaluate_series(group) for group in groups]

        evaluation = EvaluationResult(series_count=len(groups))
        for outcome in outcomes:
            evaluation.plates.extend(outcome["plates"])
            evaluation.errors.extend(outcome["errors"])
            evaluation.pairwise.extend(outcome["pairwise"])
            logger.info(outcome["message"])
        return evaluation

    def evaluate_manifest(self, path: Path) -> EvaluationResult:
        return self.evaluate_records(read_manifest_records(path))
