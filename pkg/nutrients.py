"""
Nutrient model: nutrient vectors, RDA-based %DV conversion,
portion scaling and plate aggregation.
"""

import logging
import math
from dataclasses import dataclass, fields
from decimal import Decimal
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Union

import pandas as pd

from errors import DataError, MissingFile, NoDailyValueBasis, NonFiniteValue, ParseError

logger = logging.getLogger(__name__)

# Order matters: it is the column order of nutrient tables and reports.
NUTRIENTS = (
    "calories", "carbohydrates", "fibre", "fat", "protein",
    "calcium", "iron", "sodium", "zinc",
    "vitamin_b6", "vitamin_c", "vitamin_d", "vitamin_k",
)

NUTRIENT_UNITS = {
    "calories": "kcal",
    "carbohydrates": "g",
    "fibre": "g",
    "fat": "g",
    "protein": "g",
    "calcium": "mg",
    "iron": "mg",
    "sodium": "mg",
    "zinc": "mg",
    "vitamin_b6": "mg",
    "vitamin_c": "mg",
    "vitamin_d": "IU",
    "vitamin_k": "mcg",
}

TEXTURES = ("regular", "minced", "pureed")


def _check_finite(name: str, value: float) -> float:
    value = float(value)
    if not math.isfinite(value):
        raise NonFiniteValue(f"{name} must be finite, got {value}")
    return value


@dataclass(frozen=True)
class NutrientVector:
    """
    13 nutrient amounts in fixed units (see NUTRIENT_UNITS).
    None marks a nutrient with no data for the food; it is never treated as 0.
    """
    calories: Optional[float] = 0.0
    carbohydrates: Optional[float] = 0.0
    fibre: Optional[float] = 0.0
    fat: Optional[float] = 0.0
    protein: Optional[float] = 0.0
    calcium: Optional[float] = 0.0
    iron: Optional[float] = 0.0
    sodium: Optional[float] = 0.0
    zinc: Optional[float] = 0.0
    vitamin_b6: Optional[float] = 0.0
    vitamin_c: Optional[float] = 0.0
    vitamin_d: Optional[float] = 0.0
    vitamin_k: Optional[float] = 0.0

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if value is not None:
                object.__setattr__(self, f.name, _check_finite(f.name, value))

    @classmethod
    def zeros(cls) -> "NutrientVector":
        return cls()

    @classmethod
    def from_mapping(cls, values: Mapping[str, Optional[float]]) -> "NutrientVector":
        """Build from a mapping; nutrients not in the mapping are absent"""
        unknown = set(values) - set(NUTRIENTS)
        if unknown:
            raise DataError(f"unknown nutrients: {sorted(unknown)}")
        return cls(**{name: values.get(name) for name in NUTRIENTS})

    def get(self, nutrient: str) -> Optional[float]:
        if nutrient not in NUTRIENTS:
            raise DataError(f"unknown nutrient: {nutrient}")
        return getattr(self, nutrient)

    def as_dict(self) -> Dict[str, Optional[float]]:
        return {name: getattr(self, name) for name in NUTRIENTS}

    def is_portion_content(self) -> bool:
        """True when every present component is >= 0"""
        return all(v is None or v >= 0 for v in self.as_dict().values())


@dataclass(frozen=True)
class RdaEntry:
    nutrient: str
    unit: str
    amount: Optional[Decimal] = None
    male: Optional[Decimal] = None
    female: Optional[Decimal] = None


class RdaTable:
    """Assumed 100% daily values (RDA/AI, >70 years, averaged across sexes)"""

    def __init__(self, entries: Iterable[RdaEntry]):
        self.entries = {entry.nutrient: entry for entry in entries}
        missing = set(NUTRIENTS) - set(self.entries)
        if missing:
            raise DataError(f"RDA table is missing nutrients: {sorted(missing)}")

    def has_basis(self, nutrient: str) -> bool:
        return self._entry(nutrient).amount is not None

    def amount(self, nutrient: str) -> Decimal:
        entry = self._entry(nutrient)
        if entry.amount is None:
            raise NoDailyValueBasis(f"{nutrient} has no daily value basis")
        return entry.amount

    def unit(self, nutrient: str) -> str:
        return self._entry(nutrient).unit

    def nutrients_with_basis(self) -> List[str]:
        return [n for n in NUTRIENTS if self.entries[n].amount is not None]

    def _entry(self, nutrient: str) -> RdaEntry:
        try:
            return self.entries[nutrient]
        except KeyError:
            raise DataError(f"unknown nutrient: {nutrient}") from None


def _dv(nutrient: str, male: str, female: str, avg: str) -> RdaEntry:
    return RdaEntry(nutrient, NUTRIENT_UNITS[nutrient], Decimal(avg), Decimal(male), Decimal(female))


DEFAULT_RDA_TABLE = RdaTable([
    RdaEntry("calories", "kcal"),
    RdaEntry("carbohydrates", "g"),
    RdaEntry("fibre", "g"),
    RdaEntry("fat", "g"),
    RdaEntry("protein", "g"),
    _dv("calcium", "1200", "1200", "1200"),
    _dv("iron", "8", "8", "8"),
    RdaEntry("sodium", "mg"),
    _dv("zinc", "11", "8", "9.5"),
    _dv("vitamin_b6", "1.7", "1.5", "1.6"),
    _dv("vitamin_c", "90", "75", "82.5"),
    RdaEntry("vitamin_d", "IU"),
    RdaEntry("vitamin_k", "mcg"),
])


def dv_to_absolute(percent_dv: float, nutrient: str, table: RdaTable = DEFAULT_RDA_TABLE) -> float:
    """Convert a % daily value into an absolute amount in the nutrient's unit"""
    amount = table.amount(nutrient)
    percent_dv = _check_finite("percent_dv", percent_dv)
    if percent_dv < 0:
        raise DataError(f"percent_dv must be >= 0, got {percent_dv}")
    # Decimal keeps the table values exact (e.g. 50% of 82.5 mg is 41.25 mg)
    return float(Decimal(repr(percent_dv)) / Decimal(100) * amount)


def absolute_to_dv(amount: float, nutrient: str, table: RdaTable = DEFAULT_RDA_TABLE) -> float:
    """Inverse of dv_to_absolute; used for %DV-normalised error columns"""
    basis = float(table.amount(nutrient))
    return 100.0 * _check_finite(nutrient, amount) / basis


def scale_portion(portion: NutrientVector, fraction_consumed: float) -> NutrientVector:
    """Scale every present component by the consumed fraction"""
    fraction_consumed = _check_finite("fraction_consumed", fraction_consumed)
    return NutrientVector(**{
        name: None if value is None else value * fraction_consumed
        for name, value in portion.as_dict().items()
    })


def sum_plate(items: List[NutrientVector]) -> NutrientVector:
    """
    Componentwise sum across the items of a plate.
    Absent components are skipped; a nutrient absent from every item stays absent.
    """
    if not items:
        return NutrientVector.zeros()
    totals = {}
    for name in NUTRIENTS:
        present = [getattr(item, name) for item in items if getattr(item, name) is not None]
        # fsum is exactly rounded, so the result does not depend on item order
        totals[name] = math.fsum(present) if present else None
    return NutrientVector(**totals)


def clamp_for_display(vector: NutrientVector) -> NutrientVector:
    """Clamp negative intake components to 0 for human-readable output only"""
    return NutrientVector(**{
        name: None if value is None else max(value, 0.0)
        for name, value in vector.as_dict().items()
    })


@dataclass(frozen=True)
class PortionSpec:
    """One full reference portion of a food"""
    food_name: str
    nutrients_per_portion: NutrientVector
    portion_mass: float
    portion_volume: float
    texture: Optional[str] = None

    def __post_init__(self):
        mass = _check_finite("portion_mass", self.portion_mass)
        volume = _check_finite("portion_volume", self.portion_volume)
        if mass <= 0 or volume <= 0:
            raise DataError(f"{self.food_name}: portion mass and volume must be > 0")
        if self.texture is not None and self.texture not in TEXTURES:
            raise DataError(f"{self.food_name}: unknown texture '{self.texture}'")
        if not self.nutrients_per_portion.is_portion_content():
            raise DataError(f"{self.food_name}: portion nutrients must be >= 0")
        object.__setattr__(self, "portion_mass", mass)
        object.__setattr__(self, "portion_volume", volume)

    @property
    def density(self) -> float:
        """g/mL"""
        return self.portion_mass / self.portion_volume


def _parse_cell(raw: str, column: str, line: int) -> Optional[float]:
    raw = raw.strip()
    if raw == "":
        return None
    try:
        value = float(raw)
    except ValueError:
        raise ParseError(f"column '{column}': not a number: '{raw}'", line) from None
    if not math.isfinite(value):
        raise ParseError(f"column '{column}': non-finite value", line)
    return value


def load_nutrient_table(path: Union[str, Path],
                        table: RdaTable = DEFAULT_RDA_TABLE) -> Dict[str, PortionSpec]:
    """
    Load a nutrient table CSV into PortionSpecs keyed by food name.

    Columns: food_name, portion_mass_g, portion_volume_ml, then the 13 nutrients.
    A DV-basis nutrient may instead be given as '<nutrient>_pct_dv'.
    An optional 'texture' column tags the food. Empty cells are absent values.
    """
    path = Path(path)
    if not path.exists():
        raise MissingFile(str(path))

    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    columns = [c.strip() for c in frame.columns]
    frame.columns = columns

    for required in ("food_name", "portion_mass_g", "portion_volume_ml"):
        if required not in columns:
            raise ParseError(f"missing column '{required}'", 1)

    sources = {}
    for nutrient in NUTRIENTS:
        if nutrient in columns:
            sources[nutrient] = (nutrient, False)
        elif f"{nutrient}_pct_dv" in columns and table.has_basis(nutrient):
            sources[nutrient] = (f"{nutrient}_pct_dv", True)
        else:
            raise ParseError(f"missing column for nutrient '{nutrient}'", 1)

    portions: Dict[str, PortionSpec] = {}
    for index, row in frame.iterrows():
        line = int(index) + 2  # header is line 1
        name = row["food_name"].strip()
        if not name:
            raise ParseError("empty food_name", line)
        if name in portions:
            raise ParseError(f"duplicate food '{name}'", line)

        values = {}
        for nutrient, (column, is_pct) in sources.items():
            value = _parse_cell(row[column], column, line)
            if value is not None and is_pct:
                value = dv_to_absolute(value, nutrient, table)
            values[nutrient] = value

        mass = _parse_cell(row["portion_mass_g"], "portion_mass_g", line)
        volume = _parse_cell(row["portion_volume_ml"], "portion_volume_ml", line)
        if mass is None or volume is None:
            raise ParseError(f"'{name}' needs portion mass and volume", line)
        texture = (row["texture"].strip() or None) if "texture" in columns else None

        try:
            portions[name] = PortionSpec(
                food_name=name,
                nutrients_per_portion=NutrientVector.from_mapping(values),
                portion_mass=mass,
                portion_volume=volume,
                texture=texture,
            )
        except DataError as e:
            raise ParseError(str(e), line) from e

    absent = sum(v is None for p in portions.values() for v in p.nutrients_per_portion.as_dict().values())
    logger.info("Loaded %d foods from %s (%d absent nutrient values)", len(portions), path, absent)
    return portions
