"""
Per-meal classification heads: n_c 1×1 kernels over the frozen 16-channel
features, trained from the labelled full-portion plates of one meal.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from autoencoder import AugmentationConfig, FeatureExtractor, build_training_corpus
from depth_volume import BACKGROUND
from errors import (
    EmptyAfterTextureFilter,
    EmptyMask,
    FrozenWeightsViolation,
    MaskDisagreement,
    MissingClassExample,
    MissingModel,
    ShapeMismatch,
    UnknownMeal,
)
from model_store import HeadRegistry, load_weights, save_weights
from neuralnet import AdamState, Conv2D, EarlyStopRule, Sequential, masked_cross_entropy, run_training
from plate_dataset import MealPlan, RgbdPlate

logger = logging.getLogger(__name__)


class MealHeadConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    learning_rate: float = Field(default=0.1, gt=0)
    min_delta: float = Field(default=1e-5, gt=0)
    patience: int = Field(default=5, ge=1)
    validation_fraction: float = Field(default=0.3, gt=0, lt=1)
    batch_size: int = Field(default=32, ge=1)
    max_epochs: int = Field(default=200, ge=1)
    use_bias: bool = True
    pixels_per_image: int = Field(default=256, ge=1, description="food pixels sampled per augmented image")
    full_portions_only: bool = True
    seed: int = 0


@dataclass(frozen=True, eq=False)
class MealHead:
    """
    weight is (n_c, channels); class_ids map head rows back to the meal plan's
    class ids, so texture-filtered sub-heads still label in meal numbering.
    """
    meal_id: str
    weight: np.ndarray
    bias: Optional[np.ndarray]
    class_ids: Tuple[int, ...]
    class_names: Tuple[str, ...]
    class_textures: Tuple[Optional[str], ...]
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        weight = np.array(self.weight, dtype=np.float64)
        if weight.ndim != 2 or weight.shape[0] != len(self.class_ids):
            raise ShapeMismatch(f"weight {weight.shape} does not fit {len(self.class_ids)} classes")
        weight.setflags(write=False)
        object.__setattr__(self, "weight", weight)
        if self.bias is not None:
            bias = np.array(self.bias, dtype=np.float64).reshape(-1)
            if bias.shape != (weight.shape[0],):
                raise ShapeMismatch(f"bias {bias.shape} does not fit {weight.shape[0]} classes")
            bias.setflags(write=False)
            object.__setattr__(self, "bias", bias)

    @property
    def n_classes(self) -> int:
        return self.weight.shape[0]

    @property
    def parameter_count(self) -> int:
        """channels·n_c, plus n_c with bias"""
        return int(self.weight.size + (0 if self.bias is None else self.bias.size))

    def logits(self, features: np.ndarray) -> np.ndarray:
        """(n_c, H, W) class scores for (channels, H, W) features"""
        if features.ndim != 3 or features.shape[0] != self.weight.shape[1]:
            raise ShapeMismatch(f"features {features.shape} do not fit a {self.weight.shape[1]}-channel head")
        out = np.tensordot(self.weight, features, axes=([1], [0]))
        if self.bias is not None:
            out = out + self.bias[:, None, None]
        return out

    def subset(self, rows: Sequence[int]) -> "MealHead":
        rows = list(rows)
        return MealHead(
            meal_id=self.meal_id,
            weight=self.weight[rows],
            bias=None if self.bias is None else self.bias[rows],
            class_ids=tuple(self.class_ids[r] for r in rows),
            class_names=tuple(self.class_names[r] for r in rows),
            class_textures=tuple(self.class_textures[r] for r in rows),
            metadata=dict(self.metadata),
        )


@dataclass(frozen=True, eq=False)
class LabelMask:
    labels: np.ndarray

    def __post_init__(self):
        labels = np.array(self.labels, dtype=np.int16)
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)

    @classmethod
    def from_plate(cls, plate: RgbdPlate) -> "LabelMask":
        if plate.class_labels is None:
            raise MissingClassExample(f"plate {plate.series_id}/{plate.intake_index} has no labels")
        return cls(plate.class_labels)

    @property
    def food_mask(self) -> np.ndarray:
        return self.labels != BACKGROUND

    def pixel_counts(self) -> Dict[int, int]:
        ids, counts = np.unique(self.labels[self.food_mask], return_counts=True)
        return {int(i): int(c) for i, c in zip(ids, counts)}


# --- training ---

def _head_loss(model: Sequential, batch):
    x = np.stack([sample[0] for sample in batch])
    labels = np.stack([sample[1] for sample in batch])
    mask = np.ones(labels.shape, dtype=bool)
    out, caches = model.forward(x)
    loss, grad = masked_cross_entropy(out, labels, mask)
    _, grads = model.backward(grad, caches)
    return loss, grads


def _head_val_loss(model: Sequential, batch) -> float:
    x = np.stack([sample[0] for sample in batch])
    labels = np.stack([sample[1] for sample in batch])
    return masked_cross_entropy(model.predict(x), labels, np.ones(labels.shape, dtype=bool))[0]


def _pixel_samples(extractor: FeatureExtractor, corpus, n_pixels: int, rng: np.random.Generator):
    """Per augmented image: ((channels, 1, P) features, (1, P) labels) of sampled food pixels"""
    samples = []
    for color, mask, labels in corpus:
        rows, cols = np.nonzero(mask)
        if rows.size == 0:
            continue
        features = extractor.encode(color, mask)
        pick = rng.choice(rows.size, size=n_pixels, replace=rows.size < n_pixels)
        x = features[:, rows[pick], cols[pick]][:, None, :]
        samples.append((x, labels[rows[pick], cols[pick]][None, :].astype(np.int64)))
    return samples


def train_meal_head(extractor: FeatureExtractor, plates: Sequence[RgbdPlate], plan: MealPlan,
                    config: MealHeadConfig, augmentation: AugmentationConfig) -> MealHead:
    """Train only the 1×1 head; the extractor is checksum-verified unchanged afterwards"""
    if config.full_portions_only:
        plates = [p for p in plates if p.intake_index == 0]
    plates = [p for p in plates if p.class_labels is not None]
    seen = set()
    for plate in plates:
        seen.update(plate.class_ids())
    missing = [plan.classes[c].food_name for c in range(plan.n_classes) if c not in seen]
    if missing:
        raise MissingClassExample(f"meal {plan.meal_id}: no labelled example of {missing}")

    before = extractor.checksum()
    rng = np.random.default_rng(config.seed)
    corpus = build_training_corpus(
        [(p.color, p.food_mask, p.class_labels) for p in plates], augmentation, config.seed)
    samples = _pixel_samples(extractor, corpus, config.pixels_per_image, rng)
    if len(samples) < 2:
        raise MissingClassExample(f"meal {plan.meal_id}: too few food images to train")

    order = rng.permutation(len(samples))
    n_val = min(max(int(round(config.validation_fraction * len(samples))), 1), len(samples) - 1)
    val_set = [samples[i] for i in order[:n_val]]
    train_set = [samples[i] for i in order[n_val:]]

    model = Sequential([Conv2D(extractor.channels, plan.n_classes, 1, use_bias=config.use_bias,
                               rng=np.random.default_rng(config.seed))])
    training = run_training(
        model, train_set, val_set, _head_loss,
        AdamState(learning_rate=config.learning_rate),
        EarlyStopRule(config.min_delta, config.patience),
        config.max_epochs, config.batch_size, config.seed, evaluate=_head_val_loss,
    )

    if extractor.checksum() != before:
        raise FrozenWeightsViolation("feature extractor changed while training a meal head")

    params = model.parameters()
    head = MealHead(
        meal_id=plan.meal_id,
        weight=params["0.weight"][:, :, 0, 0],
        bias=params.get("0.bias"),
        class_ids=tuple(range(plan.n_classes)),
        class_names=tuple(plan.class_names()),
        class_textures=tuple(c.texture for c in plan.classes),
        metadata={
            "extractor_sha256": before,
            "seed": config.seed,
            "stop_epoch": training.stop_epoch,
            "best_epoch": training.best_epoch,
            "best_val_loss": training.best_val_loss,
            "final_train_loss": training.history[-1]["train_loss"],
            "train_images": len(train_set),
            "val_images": len(val_set),
        },
    )
    logger.info("Trained head for %s: %d classes, %d parameters, val loss %.4g",
                plan.meal_id, head.n_classes, head.parameter_count, training.best_val_loss)
    return head


# --- inference and scoring ---

def classify_pixels(extractor: FeatureExtractor, head: MealHead, plate: RgbdPlate,
                    food_mask: Optional[np.ndarray] = None) -> LabelMask:
    """
    Argmax over head logits on food pixels; equal logits resolve to the lowest row.
    food_mask overrides the plate's mask (e.g. a predicted segmentation).
    """
    mask = plate.food_mask if food_mask is None else np.asarray(food_mask, dtype=bool)
    if mask.shape != plate.shape:
        raise ShapeMismatch(f"mask {mask.shape} does not fit plate {plate.shape}")
    labels = np.full(mask.shape, BACKGROUND, dtype=np.int16)
    if not mask.any():
        return LabelMask(labels)
    logits = head.logits(extractor.encode(plate.color, mask))
    best = np.argmax(logits, axis=0)  # first maximum wins
    labels[mask] = np.asarray(head.class_ids, dtype=np.int16)[best[mask]]
    return LabelMask(labels)


def top1_accuracy(predicted: LabelMask, truth: LabelMask, intersect: bool = False) -> float:
    """Correct food pixels / food pixels; intersect=True scores only pixels both call food"""
    if predicted.labels.shape != truth.labels.shape:
        raise ShapeMismatch(f"{predicted.labels.shape} vs {truth.labels.shape}")
    food = truth.food_mask
    if not np.array_equal(predicted.food_mask, food):
        if not intersect:
            raise MaskDisagreement("predicted and true food footprints differ")
        food = food & predicted.food_mask
    total = int(food.sum())
    if total == 0:
        raise EmptyMask("no food pixels to score")
    return int((predicted.labels[food] == truth.labels[food]).sum()) / total


def select_head(meal_id: str, texture: Optional[str], registry: Mapping[str, MealHead]) -> MealHead:
    """Meal head restricted to the classes matching the prescribed texture"""
    if meal_id not in registry:
        raise UnknownMeal(f"no head for meal '{meal_id}'")
    head = registry[meal_id]
    if texture is None:
        return head
    rows = [i for i, t in enumerate(head.class_textures) if t == texture]
    if not rows:
        raise EmptyAfterTextureFilter(f"meal '{meal_id}' has no '{texture}' classes")
    return head.subset(rows)


def relabel_region(mask: LabelMask, region: np.ndarray, class_id: int) -> LabelMask:
    """Manual correction: assign class_id to the food pixels inside region"""
    region = np.asarray(region, dtype=bool)
    if region.shape != mask.labels.shape:
        raise ShapeMismatch(f"region {region.shape} vs labels {mask.labels.shape}")
    labels = np.array(mask.labels)
    labels[region & mask.food_mask] = class_id
    return LabelMask(labels)


# --- persistence ---

def save_meal_head(path: Union[str, Path], head: MealHead) -> Path:
    params = {"weight": head.weight}
    if head.bias is not None:
        params["bias"] = head.bias
    metadata = dict(head.metadata)
    metadata.update({
        "kind": "meal_head",
        "meal_id": head.meal_id,
        "class_ids": list(head.class_ids),
        "class_names": list(head.class_names),
        "class_textures": list(head.class_textures),
        "parameter_count": head.parameter_count,
    })
    return save_weights(path, params, metadata)


def load_meal_head(path: Union[str, Path]) -> MealHead:
    params, metadata = load_weights(path)
    if metadata.get("kind") != "meal_head":
        raise MissingModel(f"{path} is not a meal head weight file")
    known = {"kind", "meal_id", "class_ids", "class_names", "class_textures", "parameter_count"}
    return MealHead(
        meal_id=metadata["meal_id"],
        weight=params["weight"],
        bias=params.get("bias"),
        class_ids=tuple(metadata["class_ids"]),
        class_names=tuple(metadata["class_names"]),
        class_textures=tuple(metadata["class_textures"]),
        metadata={k: v for k, v in metadata.items() if k not in known},
    )


def load_heads(registry: HeadRegistry, meal_ids: Sequence[str]) -> Dict[str, MealHead]:
    """Unfiltered heads for every requested meal"""
    heads = {}
    for meal_id in meal_ids:
        path = registry.lookup(meal_id)
        if path is None:
            raise MissingModel(f"no trained head registered for meal '{meal_id}'")
        heads[meal_id] = load_meal_head(path)
    return heads


def head_summary(heads: Mapping[str, MealHead]) -> List[Dict[str, Any]]:
    return [{"meal_id": m, "classes": h.n_classes, "parameters": h.parameter_count}
            for m, h in sorted(heads.items())]
