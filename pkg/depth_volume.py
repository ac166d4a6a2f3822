"""
Depth-to-volume conversion.

Depth grids hold camera-to-surface distances in cm (smaller = taller food).
Food height is measured against the calibrated table plane, and each pixel's
footprint is scaled by its own distance (pinhole similar triangles).
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import ndimage

from errors import (
    DegenerateConfiguration,
    NonPositiveDepth,
    ShapeMismatch,
    ZeroReferenceVolume,
)

logger = logging.getLogger(__name__)

BACKGROUND = -1


class CalibrationProfile(BaseModel):
    """Camera calibration shared by the generator and the integrator"""
    model_config = ConfigDict(frozen=True)

    reference_pixel_width_cm: float = Field(default=0.086, gt=0, description="cm per pixel at reference distance")
    reference_distance_cm: float = Field(default=44.0, gt=0, description="distance the pixel width was measured at")
    table_distance_cm: float = Field(default=44.0, gt=0, description="camera to empty plate plane")

    @model_validator(mode="after")
    def _check_order(self):
        if self.reference_distance_cm > self.table_distance_cm:
            raise ValueError("reference_distance_cm must be <= table_distance_cm")
        return self

    @property
    def width_per_cm(self) -> float:
        """Pixel width grows linearly with distance: width = width_per_cm * d"""
        return self.reference_pixel_width_cm / self.reference_distance_cm

    def pixel_width(self, distance_cm):
        return self.width_per_cm * distance_cm


def _check_grids(depth: np.ndarray, mask: np.ndarray):
    if depth.shape != mask.shape:
        raise ShapeMismatch(f"depth {depth.shape} and mask {mask.shape} differ")
    if depth.ndim != 2:
        raise ShapeMismatch(f"expected 2-D grids, got {depth.ndim}-D")


def pixel_volumes(depth: np.ndarray, mask: np.ndarray,
                  cal: CalibrationProfile) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per-pixel volume contributions h·(Δx)² (zero outside mask) and the
    boolean grid of masked pixels whose height was clamped to 0.
    """
    depth = np.asarray(depth, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    _check_grids(depth, mask)

    masked_depth = depth[mask]
    if masked_depth.size and not (np.all(np.isfinite(masked_depth)) and masked_depth.min() > 0):
        raise NonPositiveDepth("depth must be finite and > 0 on food pixels")

    height = cal.table_distance_cm - depth
    clamped = mask & (height < 0)
    height = np.where(mask, np.maximum(height, 0.0), 0.0)
    width = cal.pixel_width(depth)
    return height * width * width, clamped


def integrate_volume_with_diagnostics(depth: np.ndarray, mask: np.ndarray,
                                      cal: CalibrationProfile) -> Tuple[float, int]:
    """Volume in mL plus the number of clamped (below-table) pixels"""
    volumes, clamped = pixel_volumes(depth, mask, cal)
    mask = np.asarray(mask, dtype=bool)
    n_clamped = int(clamped.sum())
    if n_clamped:
        logger.debug("%d food pixels below the table plane clamped to height 0", n_clamped)
    return math.fsum(volumes[mask]), n_clamped


def integrate_volume(depth: np.ndarray, mask: np.ndarray, cal: CalibrationProfile) -> float:
    """V = Σ h_i·(Δx_i)² over mask pixels, in cm³ (= mL)"""
    return integrate_volume_with_diagnostics(depth, mask, cal)[0]


@dataclass(frozen=True)
class VolumeEstimate:
    per_class: Dict[int, float]
    plate_volume: float
    pixel_counts: Dict[int, int]
    clamped_pixels: int = 0

    def volume(self, class_id: int) -> float:
        return self.per_class.get(class_id, 0.0)


def estimate_volumes(depth: np.ndarray, labels: np.ndarray, cal: CalibrationProfile,
                     n_classes: int, plate_mask: Optional[np.ndarray] = None) -> VolumeEstimate:
    """
    Per-class and whole-plate volumes from a label grid (BACKGROUND where no food).
    plate_mask defaults to every labelled pixel; pass the food mask to measure
    the whole plate independently of classification.
    """
    labels = np.asarray(labels)
    if plate_mask is None:
        plate_mask = labels != BACKGROUND
    plate_mask = np.asarray(plate_mask, dtype=bool)
    if labels.shape != plate_mask.shape:
        raise ShapeMismatch(f"labels {labels.shape} and mask {plate_mask.shape} differ")

    volumes, clamped = pixel_volumes(depth, plate_mask | (labels != BACKGROUND), cal)
    per_class = {}
    counts = {}
    for class_id in range(n_classes):
        selected = labels == class_id
        per_class[class_id] = math.fsum(volumes[selected])
        counts[class_id] = int(selected.sum())

    return VolumeEstimate(
        per_class=per_class,
        plate_volume=math.fsum(volumes[plate_mask]),
        pixel_counts=counts,
        clamped_pixels=int(clamped.sum()),
    )


def relative_intake(reference: VolumeEstimate, after: VolumeEstimate, class_id: int) -> float:
    """Signed fraction of the reference class volume that disappeared"""
    ref = reference.volume(class_id)
    if ref <= 0:
        raise ZeroReferenceVolume(f"class {class_id} has no reference volume")
    return (ref - after.volume(class_id)) / ref


def bulk_fraction(reference: VolumeEstimate, after: VolumeEstimate) -> float:
    """Class-agnostic intake: relative change of the whole-plate volume"""
    if reference.plate_volume <= 0:
        raise ZeroReferenceVolume("reference plate has no food volume")
    return (reference.plate_volume - after.plate_volume) / reference.plate_volume


def pairwise_intake_changes(estimates: Sequence[VolumeEstimate],
                            class_id: Optional[int] = None) -> List[Tuple[int, int, float]]:
    """
    (i, j, (V_i − V_j)/V_ref) for every plate pair i < j of a series.
    estimates[0] is the reference; class_id None compares whole plates.
    """
    if not estimates:
        return []

    def _volume(estimate: VolumeEstimate) -> float:
        return estimate.plate_volume if class_id is None else estimate.volume(class_id)

    ref = _volume(estimates[0])
    if ref <= 0:
        raise ZeroReferenceVolume("reference plate has no food volume")
    changes = []
    for i in range(len(estimates)):
        for j in range(i + 1, len(estimates)):
            changes.append((i, j, (_volume(estimates[i]) - _volume(estimates[j])) / ref))
    return changes


# --- colour/depth registration ---

@dataclass(frozen=True)
class SimilarityTransform:
    """Non-reflective similarity mapping colour (x, y) to depth (x, y)"""
    scale: float
    angle: float
    tx: float
    ty: float
    rms: float = field(default=0.0, compare=False)

    def __post_init__(self):
        if not self.scale > 0:
            raise DegenerateConfiguration(f"scale must be > 0, got {self.scale}")

    @property
    def matrix(self) -> np.ndarray:
        a = self.scale * math.cos(self.angle)
        b = self.scale * math.sin(self.angle)
        return np.array([[a, -b, self.tx], [b, a, self.ty], [0.0, 0.0, 1.0]])

    def apply(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        m = self.matrix
        return points @ m[:2, :2].T + m[:2, 2]

    def inverse(self) -> "SimilarityTransform":
        scale = 1.0 / self.scale
        c, s = math.cos(-self.angle), math.sin(-self.angle)
        tx = -scale * (c * self.tx - s * self.ty)
        ty = -scale * (s * self.tx + c * self.ty)
        return SimilarityTransform(scale, -self.angle, tx, ty)


def fit_similarity_transform(source, target) -> SimilarityTransform:
    """
    Least-squares similarity from ≥2 corresponding (x, y) pairs.
    Solves the linear problem in (a, b, tx, ty) with a = s·cosθ, b = s·sinθ.
    """
    src = np.asarray(source, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(target, dtype=np.float64).reshape(-1, 2)
    if src.shape != dst.shape:
        raise ShapeMismatch(f"{len(src)} source points vs {len(dst)} target points")
    if len(src) < 2:
        raise DegenerateConfiguration("need at least 2 point pairs")
    if np.allclose(src, src[0], rtol=0.0, atol=1e-12):
        raise DegenerateConfiguration("all source points coincide")

    n = len(src)
    design = np.zeros((2 * n, 4))
    design[0::2] = np.column_stack([src[:, 0], -src[:, 1], np.ones(n), np.zeros(n)])
    design[1::2] = np.column_stack([src[:, 1], src[:, 0], np.zeros(n), np.ones(n)])
    rhs = dst.reshape(-1)

    (a, b, tx, ty), *_ = np.linalg.lstsq(design, rhs, rcond=None)
    scale = math.hypot(a, b)
    if scale <= 1e-12:
        raise DegenerateConfiguration("all target points coincide")

    residual = design @ np.array([a, b, tx, ty]) - rhs
    rms = math.sqrt(float(np.sum(residual ** 2)) / n)
    logger.debug("similarity fit: scale=%.6g angle=%.6g rms=%.3g", scale, math.atan2(b, a), rms)
    return SimilarityTransform(scale, math.atan2(b, a), float(tx), float(ty), rms=rms)


def warp_to_depth(grid: np.ndarray, transform: SimilarityTransform,
                  output_shape: Optional[Tuple[int, int]] = None, fill=0) -> np.ndarray:
    """Resample a colour-frame label/mask grid into the depth frame (nearest neighbour)"""
    grid = np.asarray(grid)
    if grid.ndim != 2:
        raise ShapeMismatch("warp_to_depth expects a 2-D grid")
    output_shape = output_shape or grid.shape

    # ndimage maps output (row, col) to input (row, col), i.e. depth -> colour
    inv = transform.inverse().matrix
    a, b = inv[0, 0], inv[1, 0]
    matrix = np.array([[a, b], [-b, a]])
    offset = np.array([inv[1, 2], inv[0, 2]])

    dtype = grid.dtype
    work = grid.astype(np.float64)
    warped = ndimage.affine_transform(work, matrix, offset=offset, output_shape=output_shape,
                                      order=0, mode="constant", cval=float(fill))
    return warped.astype(dtype)
