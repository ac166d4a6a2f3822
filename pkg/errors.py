"""
Error types for the plate nutrient tracker.

Every error carries the CLI exit code it maps to:
  1 usage/config, 2 data, 3 model.
"""

from typing import Optional


class TrackerError(Exception):
    """Base class for all tracker errors"""
    exit_code = 2


class ConfigError(TrackerError):
    """Invalid or unreadable configuration"""
    exit_code = 1


class DataError(TrackerError, ValueError):
    """Bad input data (values, grids, manifests, tables)"""
    exit_code = 2


class ModelError(TrackerError):
    """Missing, corrupt or misbehaving model"""
    exit_code = 3


# --- nutrient-model ---

class NonFiniteValue(DataError):
    pass


class NoDailyValueBasis(DataError):
    pass


# --- plate-dataset ---

class OverlapInfeasible(DataError):
    pass


class ParseError(DataError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DimensionMismatch(DataError):
    def __init__(self, message: str, path: Optional[str] = None):
        self.path = path
        if path is not None:
            message = f"{path}: {message}"
        super().__init__(message)


class MissingFile(DataError):
    def __init__(self, path: str):
        self.path = str(path)
        super().__init__(f"missing file: {path}")


class UnknownClass(DataError):
    pass


class ManifestInvalid(DataError):
    pass


# --- depth-volume / neuralnet-core ---

class ShapeMismatch(DataError):
    pass


class NonPositiveDepth(DataError):
    pass


class ZeroReferenceVolume(DataError):
    pass


class DegenerateConfiguration(DataError):
    pass


class EmptyMask(DataError):
    pass


class LabelOutOfRange(DataError):
    pass


class DivergenceDetected(ModelError):
    pass


class WeightFormatError(ModelError):
    pass


class FrozenWeightsViolation(ModelError):
    pass


class MissingModel(ModelError):
    pass


# --- autoencoder / meal classifier ---

class CorpusTooSmall(DataError):
    pass


class MissingClassExample(DataError):
    pass


class MaskDisagreement(DataError):
    pass


class UnknownMeal(DataError):
    pass


class EmptyAfterTextureFilter(DataError):
    pass


# --- metrics-agreement / reporting ---

class DegenerateX(DataError):
    pass


class LengthMismatch(DataError):
    pass


class ZeroReference(DataError):
    pass


class NoOverlap(DataError):
    pass


class NoData(DataError):
    pass
