"""
Plate dataset: RGB-D plate records, the synthetic plate-series generator,
consumption simulation and the JSON-lines manifest format.
"""

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import imageio.v3 as iio
import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from depth_volume import BACKGROUND, CalibrationProfile, pixel_volumes
from errors import (
    DataError,
    DimensionMismatch,
    ManifestInvalid,
    MissingFile,
    NonPositiveDepth,
    OverlapInfeasible,
    ParseError,
    UnknownClass,
)
from nutrients import PortionSpec, load_nutrient_table

logger = logging.getLogger(__name__)

DEPTH_UNITS_PER_CM = 100  # depth PNGs store distance in 0.01 cm
PROFILES = ("slab", "dome", "rough", "toast")
SCHEDULES = ("uniform", "staggered")


def _frozen(array: np.ndarray, dtype=None) -> np.ndarray:
    out = np.array(array, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class PlateRegion:
    """Plate disc in pixel coordinates"""
    center_row: float
    center_col: float
    radius: float

    def mask(self, shape: Tuple[int, int]) -> np.ndarray:
        rows, cols = np.indices(shape)
        return (rows - self.center_row) ** 2 + (cols - self.center_col) ** 2 <= self.radius ** 2


@dataclass(frozen=True, eq=False)
class RgbdPlate:
    """
    One top-down RGB-D capture. Depth is camera-to-surface distance in cm.
    class_labels holds class ids (indices into the meal's classes) or BACKGROUND.
    """
    color: np.ndarray
    depth: np.ndarray
    food_mask: np.ndarray
    class_labels: Optional[np.ndarray] = None
    true_mass: Dict[int, float] = field(default_factory=dict)
    true_volume: Dict[int, float] = field(default_factory=dict)
    intake_level: float = 0.0
    meal_id: str = ""
    series_id: str = ""
    intake_index: int = 0
    plate_region: Optional[PlateRegion] = None

    def __post_init__(self):
        color = _frozen(self.color, np.uint8)
        depth = _frozen(self.depth, np.float64)
        mask = _frozen(self.food_mask, bool)
        if color.ndim != 3 or color.shape[2] != 3:
            raise DimensionMismatch(f"color grid must be H×W×3, got {color.shape}")
        if depth.shape != color.shape[:2] or mask.shape != color.shape[:2]:
            raise DimensionMismatch(
                f"color {color.shape[:2]}, depth {depth.shape} and mask {mask.shape} differ")
        if not (np.all(np.isfinite(depth)) and depth.min(initial=1.0) > 0):
            raise NonPositiveDepth("depth must be finite and > 0")
        object.__setattr__(self, "color", color)
        object.__setattr__(self, "depth", depth)
        object.__setattr__(self, "food_mask", mask)

        if self.class_labels is not None:
            labels = _frozen(self.class_labels, np.int16)
            if labels.shape != mask.shape:
                raise DimensionMismatch(f"labels {labels.shape} and mask {mask.shape} differ")
            if np.any((labels == BACKGROUND) == mask) or labels.min(initial=0) < BACKGROUND:
                raise DataError("class labels must be background exactly where the food mask is false")
            object.__setattr__(self, "class_labels", labels)

        if not 0.0 <= self.intake_level <= 1.0:
            raise DataError(f"intake level must be in [0, 1], got {self.intake_level}")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.depth.shape

    def check_calibration(self, cal: CalibrationProfile):
        """Depth may not lie beyond the table plane"""
        if self.depth.max(initial=0.0) > cal.table_distance_cm + 1e-9:
            raise DataError(
                f"depth {self.depth.max():.3f} cm exceeds table distance {cal.table_distance_cm} cm")

    def class_ids(self) -> List[int]:
        if self.class_labels is None:
            return []
        return sorted(int(c) for c in np.unique(self.class_labels) if c != BACKGROUND)


@dataclass(frozen=True)
class PlateSeries:
    """Plates of one sample ordered by intake; plates[0] is the full reference portion"""
    series_id: str
    meal_id: str
    plates: Tuple[RgbdPlate, ...]

    def __post_init__(self):
        plates = tuple(self.plates)
        if not plates:
            raise DataError(f"series {self.series_id} has no plates")
        if plates[0].intake_level != 0:
            raise DataError(f"series {self.series_id}: reference plate must have intake level 0")
        for earlier, later in zip(plates, plates[1:]):
            for class_id, volume in later.true_volume.items():
                if volume > earlier.true_volume.get(class_id, math.inf) * (1 + 1e-12):
                    raise DataError(
                        f"series {self.series_id}: class {class_id} volume increases "
                        f"at intake index {later.intake_index}")
        object.__setattr__(self, "plates", plates)

    @property
    def reference(self) -> RgbdPlate:
        return self.plates[0]

    def __len__(self):
        return len(self.plates)


@dataclass(frozen=True)
class MealPlan:
    meal_id: str
    classes: Tuple[PortionSpec, ...]
    texture_filter: Optional[str] = None
    dataset: str = "synthetic"

    def __post_init__(self):
        classes = tuple(self.classes)
        if not classes:
            raise DataError(f"meal {self.meal_id} needs at least one class")
        names = [c.food_name for c in classes]
        if len(set(names)) != len(names):
            raise DataError(f"meal {self.meal_id} has duplicate class names")
        object.__setattr__(self, "classes", classes)

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def class_names(self) -> List[str]:
        return [c.food_name for c in self.classes]

    def class_id(self, food_name: str) -> int:
        try:
            return self.class_names().index(food_name)
        except ValueError:
            raise UnknownClass(f"'{food_name}' is not on meal {self.meal_id}") from None


class FoodShape(BaseModel):
    """Analytic geometry of one food item on the plate"""
    model_config = ConfigDict(frozen=True)

    profile: str = Field(default="slab", description="slab | dome | rough | toast")
    radius_cm: float = Field(gt=0)
    height_cm: float = Field(gt=0)
    color: Tuple[int, int, int] = (200, 120, 60)
    texture_amplitude: float = Field(default=0.0, ge=0, description="per-pixel colour noise SD")
    roughness: float = Field(default=0.3, ge=0, lt=1, description="relative height ripple (rough)")
    wavelength_cm: float = Field(default=1.0, gt=0)
    tilt_deg: float = Field(default=8.0, ge=0, lt=60, description="toast tilt")
    lift_cm: float = Field(default=0.4, ge=0, description="air gap under the toast's low edge")
    center_cm: Optional[Tuple[float, float]] = Field(default=None, description="(x, y) from plate centre")

    def analytic_volume(self) -> float:
        """True food volume in mL; the toast's air pocket is not food"""
        r, h = self.radius_cm, self.height_cm
        if self.profile == "dome":
            return math.pi * h * (3 * r * r + h * h) / 6.0
        # a ripple of sin(x)sin(y) is odd in x, so it integrates to 0 over the disc
        return math.pi * r * r * h

    def heights(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Surface height above the plate at plane offsets (cm); 0 outside the footprint"""
        r, h = self.radius_cm, self.height_cm
        rho2 = x * x + y * y
        inside = rho2 < r * r
        if self.profile == "slab":
            surface = np.full_like(x, h)
        elif self.profile == "dome":
            sphere = (r * r + h * h) / (2 * h)
            surface = np.sqrt(np.maximum(sphere * sphere - rho2, 0.0)) - (sphere - h)
        elif self.profile == "rough":
            k = 2 * math.pi / self.wavelength_cm
            surface = h * (1 + self.roughness * np.sin(k * x) * np.sin(k * y))
        elif self.profile == "toast":
            surface = self.lift_cm + h + math.tan(math.radians(self.tilt_deg)) * (x + r)
        else:
            raise DataError(f"unknown profile '{self.profile}', expected one of {PROFILES}")
        return np.where(inside, np.maximum(surface, 0.0), 0.0)


class GeneratorSettings(BaseModel):
    model_config = ConfigDict(frozen=True)

    image_size: int = Field(default=160, ge=16)
    plate_radius_cm: float = Field(default=6.5, gt=0)
    noise_sigma_cm: float = Field(default=0.1, ge=0)
    plate_rgb: Tuple[int, int, int] = (235, 235, 228)
    table_rgb: Tuple[int, int, int] = (70, 62, 55)
    schedule: str = "uniform"
    levels: List[float] = [0.0, 0.25, 0.5, 0.75, 1.0]


# --- rendering ---

@dataclass
class _RenderedItem:
    heights: np.ndarray  # square block centred on the item
    pitch: float         # cm per pixel on the item


def _sample_item(shape: FoodShape, pitch: float) -> np.ndarray:
    n = int(math.ceil(shape.radius_cm / pitch)) + 1
    offsets = np.arange(-n, n + 1) * pitch
    y, x = np.meshgrid(offsets, offsets, indexing="ij")
    return shape.heights(x, y)


def _render_item(shape: FoodShape, cal: CalibrationProfile, max_iter: int = 60) -> _RenderedItem:
    """
    Weak-perspective render: the item gets one pixel pitch k·z̄, where z̄ is the
    height-weighted RMS distance of its surface, so Σ h·(k·d)² reproduces the
    Riemann sum of the analytic profile.
    """
    table = cal.table_distance_cm
    if shape.profile != "toast" and shape.height_cm >= table / 3:
        raise DataError(f"food height {shape.height_cm} cm is too tall for table distance {table} cm")

    k = cal.width_per_cm
    pitch = k * table
    for _ in range(max_iter):
        heights = _sample_item(shape, pitch)
        h = heights[heights > 0]
        if h.size == 0:
            raise DataError(f"food of radius {shape.radius_cm} cm covers no pixel")
        z = table - h
        if z.min() <= 0:
            raise DataError("food surface reaches the camera")
        updated = k * math.sqrt(math.fsum(h * z * z) / math.fsum(h))
        if abs(updated - pitch) <= 1e-15 * pitch:
            pitch = updated
            break
        pitch = updated
    return _RenderedItem(_sample_item(shape, pitch), pitch)


def _place_items(rendered: Sequence[_RenderedItem], shapes: Sequence[FoodShape],
                 plate: PlateRegion, cal: CalibrationProfile) -> List[Tuple[int, int]]:
    """Integer pixel centres for every item, auto-placed on a ring when not given"""
    radii = [shape.radius_cm / item.pitch for shape, item in zip(shapes, rendered)]
    table_pitch = cal.pixel_width(cal.table_distance_cm)
    n = len(shapes)
    # one pixel of margin plus one for rounding the centres
    ring = 0.0 if n == 1 else plate.radius - max(radii) - 2.0

    centers = []
    for i, shape in enumerate(shapes):
        if shape.center_cm is not None:
            dx, dy = shape.center_cm[0] / table_pitch, shape.center_cm[1] / table_pitch
        else:
            angle = 2 * math.pi * i / n
            dx, dy = ring * math.cos(angle), ring * math.sin(angle)
        centers.append((int(round(plate.center_row + dy)), int(round(plate.center_col + dx))))

    for i, (row, col) in enumerate(centers):
        if math.hypot(row - plate.center_row, col - plate.center_col) + radii[i] + 1 > plate.radius:
            raise OverlapInfeasible(f"item {i} does not fit on the plate disc")
        for j in range(i):
            gap = math.hypot(row - centers[j][0], col - centers[j][1])
            if gap < radii[i] + radii[j] + 1:
                raise OverlapInfeasible(f"items {j} and {i} overlap")
    return centers


def render_plate(plan: MealPlan, shapes: Sequence[FoodShape], cal: CalibrationProfile,
                 settings: GeneratorSettings, rng: np.random.Generator,
                 series_id: str = "") -> RgbdPlate:
    """Noise-free full-portion reference plate"""
    if len(shapes) != plan.n_classes:
        raise DataError(f"meal {plan.meal_id}: {plan.n_classes} classes but {len(shapes)} shapes")

    size = settings.image_size
    table = cal.table_distance_cm
    plate = PlateRegion(size // 2, size // 2, settings.plate_radius_cm / cal.pixel_width(table))
    if plate.radius > size / 2 - 1:
        raise DataError("plate disc does not fit in the image; lower plate_radius_cm or raise image_size")

    rendered = [_render_item(shape, cal) for shape in shapes]
    centers = _place_items(rendered, shapes, plate, cal)

    color = np.empty((size, size, 3), dtype=np.float64)
    color[:] = settings.table_rgb
    color[plate.mask((size, size))] = settings.plate_rgb
    depth = np.full((size, size), table)
    labels = np.full((size, size), BACKGROUND, dtype=np.int16)

    for class_id, (shape, item, (row, col)) in enumerate(zip(shapes, rendered, centers)):
        n = item.heights.shape[0] // 2
        if row - n < 0 or col - n < 0 or row + n >= size or col + n >= size:
            raise OverlapInfeasible(f"item {class_id} runs off the image")
        window = (slice(row - n, row + n + 1), slice(col - n, col + n + 1))
        food = item.heights > 0
        depth[window][food] = table - item.heights[food]
        labels[window][food] = class_id
        jitter = rng.normal(0.0, shape.texture_amplitude, size=(int(food.sum()), 3))
        color[window][food] = np.asarray(shape.color, dtype=np.float64) + jitter

    volumes = {i: shape.analytic_volume() for i, shape in enumerate(shapes)}
    return RgbdPlate(
        color=np.clip(np.round(color), 0, 255).astype(np.uint8),
        depth=depth,
        food_mask=labels != BACKGROUND,
        class_labels=labels,
        true_volume=volumes,
        true_mass={i: plan.classes[i].density * v for i, v in volumes.items()},
        intake_level=0.0,
        meal_id=plan.meal_id,
        series_id=series_id,
        intake_index=0,
        plate_region=plate,
    )


def _plate_background_color(plate: RgbdPlate) -> np.ndarray:
    empty = ~plate.food_mask
    if plate.plate_region is not None:
        empty &= plate.plate_region.mask(plate.shape)
    if not empty.any():
        return np.zeros(3, dtype=np.uint8)
    return np.round(np.median(plate.color[empty], axis=0)).astype(np.uint8)


def simulate_consumption(plate: RgbdPlate, class_id: int, fraction: float,
                         cal: CalibrationProfile, angle: float = 0.0) -> RgbdPlate:
    """
    Eat `fraction` of a class's integrated volume, starting from the side the
    direction `angle` (radians, image x/y) points away from. Whole pixels are
    removed in order, then the boundary pixel is lowered so the removed volume
    is exact. Removed pixels drop to the table plane and take the plate colour.
    """
    if not 0.0 <= fraction <= 1.0:
        raise DataError(f"fraction must be in [0, 1], got {fraction}")
    if plate.class_labels is None:
        raise UnknownClass("plate has no class labels")
    selected = plate.class_labels == class_id
    if not selected.any():
        raise UnknownClass(f"class {class_id} is not on the plate")
    if fraction == 0.0:
        return plate

    table = cal.table_distance_cm
    rows, cols = np.nonzero(selected)
    order = np.argsort(cols * math.cos(angle) + rows * math.sin(angle), kind="stable")
    rows, cols = rows[order], cols[order]
    volumes, _ = pixel_volumes(plate.depth, selected, cal)
    v = volumes[rows, cols]

    depth = np.array(plate.depth)
    if fraction >= 1.0:
        n_removed = len(v)
    else:
        target = fraction * math.fsum(v)
        n_removed = int(np.searchsorted(np.cumsum(v), target, side="right"))
        n_removed = min(n_removed, len(v) - 1)
        remainder = min(max(target - math.fsum(v[:n_removed]), 0.0), v[n_removed])
        depth[rows[n_removed], cols[n_removed]] = _lower_pixel(
            depth[rows[n_removed], cols[n_removed]], v[n_removed] - remainder, cal)

    gone = (rows[:n_removed], cols[:n_removed])
    depth[gone] = table
    labels = np.array(plate.class_labels)
    labels[gone] = BACKGROUND
    mask = np.array(plate.food_mask)
    mask[gone] = False
    color = np.array(plate.color)
    color[gone] = _plate_background_color(plate)

    return dataclasses.replace(plate, color=color, depth=depth, food_mask=mask, class_labels=labels)


def _lower_pixel(depth: float, keep_volume: float, cal: CalibrationProfile) -> float:
    """Depth in [depth, table] at which the pixel holds keep_volume (bisection)"""
    table = cal.table_distance_cm

    def volume_at(d: float) -> float:
        w = cal.pixel_width(d)
        return (table - d) * w * w

    lo, hi = depth, table  # volume_at decreases on [lo, hi] for heights below table/3
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if volume_at(mid) > keep_volume:
            lo = mid
        else:
            hi = mid
    return lo if abs(volume_at(lo) - keep_volume) <= abs(volume_at(hi) - keep_volume) else hi


def _observe(plate: RgbdPlate, cal: CalibrationProfile, sigma: float,
             rng: np.random.Generator) -> RgbdPlate:
    """Sensor model: Gaussian depth noise, clipped to (0, table], quantised to 0.01 cm"""
    depth = np.array(plate.depth)
    if sigma > 0:
        depth = depth + rng.normal(0.0, sigma, size=depth.shape)
    depth = np.clip(depth, 1.0 / DEPTH_UNITS_PER_CM, cal.table_distance_cm)
    depth = np.round(depth * DEPTH_UNITS_PER_CM) / DEPTH_UNITS_PER_CM
    return dataclasses.replace(plate, depth=depth)


def _intake_schedule(levels: Sequence[float], n_classes: int, schedule: str,
                     rng: np.random.Generator) -> np.ndarray:
    """(n_levels, n_classes) consumed fractions, non-decreasing down each column"""
    levels = np.asarray(levels, dtype=np.float64)
    if schedule == "uniform":
        return np.repeat(levels[:, None], n_classes, axis=1)
    if schedule == "staggered":
        table = np.zeros((len(levels), n_classes))
        for c in range(n_classes):
            draws = rng.choice(levels[1:], size=len(levels) - 1, replace=True) if len(levels) > 1 else []
            table[1:, c] = np.sort(draws)
        return table
    raise DataError(f"unknown schedule '{schedule}', expected one of {SCHEDULES}")


def generate_plate_series(plan: MealPlan, shapes: Sequence[FoodShape], levels: Sequence[float],
                          seed: Union[int, np.random.SeedSequence],
                          cal: Optional[CalibrationProfile] = None,
                          settings: Optional[GeneratorSettings] = None,
                          series_id: Optional[str] = None) -> PlateSeries:
    """Render a full portion and the plates left after each simulated intake level"""
    cal = cal or CalibrationProfile()
    settings = settings or GeneratorSettings()
    levels = [float(level) for level in levels]
    if not levels or levels[0] != 0.0:
        raise DataError("levels must start at 0")
    if any(not 0.0 <= level <= 1.0 for level in levels) or levels != sorted(levels):
        raise DataError("levels must be sorted and within [0, 1]")

    rng = np.random.default_rng(seed)
    series_id = series_id or f"{plan.meal_id}-{seed if isinstance(seed, int) else seed.entropy}"
    reference = render_plate(plan, shapes, cal, settings, rng, series_id)
    schedule = _intake_schedule(levels, plan.n_classes, settings.schedule, rng)
    angles = rng.uniform(0.0, 2 * math.pi, size=plan.n_classes)
    total_volume = math.fsum(reference.true_volume.values())

    plates = []
    for index, fractions in enumerate(schedule):
        plate = reference
        for class_id, fraction in enumerate(fractions):
            plate = simulate_consumption(plate, class_id, float(fraction), cal, float(angles[class_id]))
        volumes = {c: (1.0 - fractions[c]) * v for c, v in reference.true_volume.items()}
        eaten = math.fsum(fractions[c] * v for c, v in reference.true_volume.items())
        plate = dataclasses.replace(
            plate,
            true_volume=volumes,
            true_mass={c: plan.classes[c].density * v for c, v in volumes.items()},
            intake_level=min(eaten / total_volume, 1.0),
            intake_index=index,
        )
        plates.append(_observe(plate, cal, settings.noise_sigma_cm, rng))

    logger.debug("generated series %s: %d plates", series_id, len(plates))
    return PlateSeries(series_id=series_id, meal_id=plan.meal_id, plates=tuple(plates))


# --- study plans ---

@dataclass(frozen=True)
class MealStudy:
    """One meal of a study plan: which foods, how they look, how many series"""
    plan: MealPlan
    shapes: Tuple[FoodShape, ...]
    series_count: int = 1


def load_study_plan(path: Union[str, Path]) -> List[MealStudy]:
    """
    Read a JSON study plan:
    {"nutrient_table": "foods.csv", "meals": [{"meal_id", "dataset", "texture_filter",
     "series_count", "items": [{"food": name, <FoodShape fields>}]}]}
    """
    path = Path(path)
    if not path.exists():
        raise MissingFile(str(path))
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: {e.msg}", e.lineno) from e

    foods = load_nutrient_table(path.parent / raw["nutrient_table"])
    studies = []
    for meal in raw.get("meals", []):
        items = meal.get("items", [])
        missing = [item["food"] for item in items if item["food"] not in foods]
        if missing:
            raise UnknownClass(f"meal {meal['meal_id']}: foods not in nutrient table: {missing}")
        plan = MealPlan(
            meal_id=meal["meal_id"],
            classes=tuple(foods[item["food"]] for item in items),
            texture_filter=meal.get("texture_filter"),
            dataset=meal.get("dataset", "synthetic"),
        )
        shapes = [FoodShape(**{k: v for k, v in item.items() if k != "food"}) for item in items]
        studies.append(MealStudy(plan=plan, shapes=tuple(shapes),
                                  series_count=int(meal.get("series_count", 1))))
    return studies


def generate_study(studies: Sequence[MealStudy], seed: int, cal: CalibrationProfile,
                   settings: GeneratorSettings) -> List[PlateSeries]:
    """Every series of a study from independent spawned seeds"""
    total = sum(study.series_count for study in studies)
    children = iter(np.random.SeedSequence(seed).spawn(total))
    series = []
    for study in studies:
        for n in range(study.series_count):
            series.append(generate_plate_series(
                study.plan, study.shapes, settings.levels, next(children), cal, settings,
                series_id=f"{study.plan.meal_id}-{n:03d}"))
    return series


# --- manifest ---

@dataclass(frozen=True)
class ManifestRecord:
    line: int
    series_id: str
    intake_index: int
    meal_id: str
    color_path: Path
    depth_path: Path
    mask_path: Path
    labels_path: Optional[Path]
    mass_g: Dict[int, float]
    volume_ml: Dict[int, float]
    intake_level: float
    plate_circle: Optional[Tuple[float, float, float]]


def write_manifest(series: Iterable[PlateSeries], out_dir: Union[str, Path],
                   name: str = "manifest.jsonl") -> Path:
    """Write PNGs for every plate and a JSON-lines manifest with paths relative to out_dir"""
    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    manifest = out_dir / name

    with open(manifest, "w", encoding="utf-8") as f:
        for s in series:
            for plate in s.plates:
                stem = f"{s.series_id}_{plate.intake_index:02d}"
                paths = {kind: f"images/{stem}_{kind}.png" for kind in ("color", "depth", "mask", "labels")}
                iio.imwrite(out_dir / paths["color"], plate.color)
                iio.imwrite(out_dir / paths["depth"],
                            np.round(plate.depth * DEPTH_UNITS_PER_CM).astype(np.uint16))
                iio.imwrite(out_dir / paths["mask"], plate.food_mask.astype(np.uint8) * 255)

                record = {
                    "series_id": s.series_id,
                    "intake_index": plate.intake_index,
                    "meal_id": plate.meal_id,
                    "color_path": paths["color"],
                    "depth_path": paths["depth"],
                    "mask_path": paths["mask"],
                    "mass_g": {str(c): m for c, m in sorted(plate.true_mass.items())},
                    "volume_ml": {str(c): v for c, v in sorted(plate.true_volume.items())},
                    "intake_level": plate.intake_level,
                }
                if plate.class_labels is not None:
                    # PNG value = class id + 1, 0 = background
                    iio.imwrite(out_dir / paths["labels"], (plate.class_labels + 1).astype(np.uint8))
                    record["labels_path"] = paths["labels"]
                if plate.plate_region is not None:
                    region = plate.plate_region
                    record["plate_circle"] = [region.center_row, region.center_col, region.radius]
                f.write(json.dumps(record) + "\n")

    logger.info("Wrote manifest %s", manifest)
    return manifest


_REQUIRED_KEYS = ("series_id", "intake_index", "color_path", "depth_path", "mask_path", "mass_g", "meal_id")


def read_manifest_records(path: Union[str, Path]) -> List[ManifestRecord]:
    """Parse a manifest without touching the image files"""
    path = Path(path)
    if not path.exists():
        raise MissingFile(str(path))
    base = path.parent

    records = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(e.msg, line_no) from e
            if not isinstance(raw, dict):
                raise ParseError("record must be a JSON object", line_no)
            missing = [key for key in _REQUIRED_KEYS if key not in raw]
            if missing:
                raise ParseError(f"missing keys {missing}", line_no)
            try:
                circle = raw.get("plate_circle")
                records.append(ManifestRecord(
                    line=line_no,
                    series_id=str(raw["series_id"]),
                    intake_index=int(raw["intake_index"]),
                    meal_id=str(raw["meal_id"]),
                    color_path=base / raw["color_path"],
                    depth_path=base / raw["depth_path"],
                    mask_path=base / raw["mask_path"],
                    labels_path=base / raw["labels_path"] if raw.get("labels_path") else None,
                    mass_g={int(k): float(v) for k, v in raw["mass_g"].items()},
                    volume_ml={int(k): float(v) for k, v in raw.get("volume_ml", {}).items()},
                    intake_level=float(raw.get("intake_level", 0.0)),
                    plate_circle=tuple(float(v) for v in circle) if circle else None,
                ))
            except (TypeError, ValueError, AttributeError) as e:
                raise ParseError(f"bad field value: {e}", line_no) from e
    return records


def _read_image(path: Path) -> np.ndarray:
    if not path.exists():
        raise MissingFile(str(path))
    try:
        return iio.imread(path)
    except (OSError, ValueError) as e:
        raise ManifestInvalid(f"{path}: unreadable image ({e})") from e


def load_plate(record: ManifestRecord) -> RgbdPlate:
    color = _read_image(record.color_path)
    if color.ndim == 3 and color.shape[2] == 4:
        color = color[..., :3]
    if color.ndim != 3:
        raise DimensionMismatch("color image must have 3 channels", str(record.color_path))
    shape = color.shape[:2]

    depth_raw = _read_image(record.depth_path)
    if depth_raw.shape != shape:
        raise DimensionMismatch(f"depth is {depth_raw.shape}, color is {shape}", str(record.depth_path))
    mask_raw = _read_image(record.mask_path)
    if mask_raw.shape != shape:
        raise DimensionMismatch(f"mask is {mask_raw.shape}, color is {shape}", str(record.mask_path))
    if not np.isin(mask_raw, (0, 255)).all():
        raise ManifestInvalid(f"{record.mask_path}: mask values must be 0 or 255")

    labels = None
    if record.labels_path is not None:
        labels_raw = _read_image(record.labels_path)
        if labels_raw.shape != shape:
            raise DimensionMismatch(f"labels are {labels_raw.shape}, color is {shape}",
                                    str(record.labels_path))
        labels = labels_raw.astype(np.int16) - 1

    region = PlateRegion(*record.plate_circle) if record.plate_circle else None
    try:
        return RgbdPlate(
            color=color,
            depth=depth_raw.astype(np.float64) / DEPTH_UNITS_PER_CM,
            food_mask=mask_raw == 255,
            class_labels=labels,
            true_mass=record.mass_g,
            true_volume=record.volume_ml,
            intake_level=record.intake_level,
            meal_id=record.meal_id,
            series_id=record.series_id,
            intake_index=record.intake_index,
            plate_region=region,
        )
    except (DimensionMismatch, MissingFile):
        raise
    except DataError as e:
        raise ManifestInvalid(f"line {record.line}: {e}") from e


def group_records(records: Iterable[ManifestRecord]) -> Dict[str, List[ManifestRecord]]:
    """Records per series in first-appearance order, plates sorted by intake index"""
    groups: Dict[str, List[ManifestRecord]] = {}
    for record in records:
        groups.setdefault(record.series_id, []).append(record)
    for series_id, group in groups.items():
        group.sort(key=lambda r: r.intake_index)
        indices = [r.intake_index for r in group]
        if len(set(indices)) != len(indices):
            raise ManifestInvalid(f"series {series_id} repeats an intake index")
    return groups


def load_series(records: Sequence[ManifestRecord]) -> PlateSeries:
    plates = tuple(load_plate(record) for record in records)
    try:
        return PlateSeries(series_id=records[0].series_id, meal_id=records[0].meal_id, plates=plates)
    except DataError as e:
        raise ManifestInvalid(str(e)) from e


def load_manifest(path: Union[str, Path]) -> List[PlateSeries]:
    """Load and cross-validate every series of a manifest"""
    groups = group_records(read_manifest_records(path))
    series = [load_series(group) for group in groups.values()]
    logger.info("Loaded %d series (%d plates) from %s",
                len(series), sum(len(s) for s in series), path)
    return series
