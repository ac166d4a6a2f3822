"""
Food/no-food masks: IOU scoring and a colour-threshold baseline segmenter
used when no external food mask is available.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy import ndimage

from errors import DataError, ShapeMismatch
from plate_dataset import PlateRegion, RgbdPlate

logger = logging.getLogger(__name__)

METHODS = ("ground-truth", "baseline", "external")


class SegmenterConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    color_threshold: float = Field(default=40.0, gt=0, description="RGB distance from the plate colour")
    opening_radius: int = Field(default=1, ge=0)
    closing_radius: int = Field(default=2, ge=0)
    annulus: Tuple[float, float] = Field(default=(0.9, 1.0), description="rim band sampled for plate colour")
    plate_rgb: Optional[Tuple[int, int, int]] = None
    plate_circle: Optional[Tuple[float, float, float]] = Field(
        default=None, description="(row, col, radius) when plates carry no region")
    flag_iou_below: float = Field(default=0.5, ge=0, le=1)


@dataclass(frozen=True, eq=False)
class SegmentationResult:
    mask: np.ndarray
    iou: float
    method: str
    flagged: bool = False


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """|A∩B| / |A∪B|, 1.0 when both are empty"""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    union = int(np.logical_or(a, b).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(a, b).sum()) / union


def _disk(radius: int) -> np.ndarray:
    rows, cols = np.indices((2 * radius + 1, 2 * radius + 1)) - radius
    return rows ** 2 + cols ** 2 <= radius ** 2


def plate_color(color: np.ndarray, region: PlateRegion, annulus: Tuple[float, float]) -> np.ndarray:
    """Median colour of the plate rim band"""
    rows, cols = np.indices(color.shape[:2])
    dist = np.hypot(rows - region.center_row, cols - region.center_col)
    band = (dist >= annulus[0] * region.radius) & (dist <= annulus[1] * region.radius)
    if not band.any():
        raise DataError("plate rim band contains no pixels")
    return np.median(color[band].astype(np.float64), axis=0)


def baseline_segment(color: np.ndarray, region: PlateRegion,
                     config: Optional[SegmenterConfig] = None) -> np.ndarray:
    """Plate pixels whose colour is far from the plate colour, cleaned by open/close"""
    config = config or SegmenterConfig()
    color = np.asarray(color)
    if color.ndim != 3 or color.shape[2] != 3:
        raise ShapeMismatch(f"colour grid must be H×W×3, got {color.shape}")

    reference = (np.asarray(config.plate_rgb, dtype=np.float64) if config.plate_rgb is not None
                 else plate_color(color, region, config.annulus))
    inside = region.mask(color.shape[:2])
    distance = np.linalg.norm(color.astype(np.float64) - reference, axis=2)
    mask = inside & (distance > config.color_threshold)

    if config.opening_radius:
        mask = ndimage.binary_opening(mask, structure=_disk(config.opening_radius))
    if config.closing_radius:
        mask = ndimage.binary_closing(mask, structure=_disk(config.closing_radius))
    return mask & inside


def _region_for(plate: RgbdPlate, config: SegmenterConfig) -> PlateRegion:
    if plate.plate_region is not None:
        return plate.plate_region
    if config.plate_circle is not None:
        return PlateRegion(*config.plate_circle)
    raise DataError(f"plate {plate.series_id}/{plate.intake_index} has no plate region; "
                    "set segmenter.plate_circle")


def segment_plate(plate: RgbdPlate, method: str = "ground-truth",
                  config: Optional[SegmenterConfig] = None,
                  external_mask: Optional[np.ndarray] = None) -> SegmentationResult:
    """Food mask from the chosen source, scored against the plate's true mask"""
    config = config or SegmenterConfig()
    if method == "ground-truth":
        mask = np.array(plate.food_mask)
    elif method == "baseline":
        mask = baseline_segment(plate.color, _region_for(plate, config), config)
    elif method == "external":
        if external_mask is None:
            raise DataError("external segmentation needs a mask")
        mask = np.asarray(external_mask, dtype=bool)
    else:
        raise DataError(f"unknown segmentation method '{method}', expected one of {METHODS}")

    score = iou(mask, plate.food_mask)
    flagged = method != "ground-truth" and score < config.flag_iou_below
    if flagged:
        logger.warning("Low segmentation IOU %.3f on %s/%d", score, plate.series_id, plate.intake_index)
    return SegmentationResult(mask=mask, iou=score, method=method, flagged=flagged)
