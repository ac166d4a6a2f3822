"""
Convolutional autoencoder trained on food images, and the frozen 16-channel
feature extractor cut from it just before the final 1×1 convolution.
"""

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy import ndimage

from depth_volume import BACKGROUND
from errors import CorpusTooSmall, EmptyMask, MissingModel, ShapeMismatch
from model_store import load_weights, save_weights
from neuralnet import (
    AdamState,
    AvgPool2,
    Conv2D,
    EarlyStopRule,
    ReLU,
    Sequential,
    TrainingResult,
    Upsample2,
    masked_mse,
    run_training,
)

logger = logging.getLogger(__name__)

# (H×W×3 uint8 colour, H×W bool mask) with optional H×W class labels
Sample = Tuple[np.ndarray, ...]


class AutoencoderConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    encoder_channels: List[int] = Field(default=[16, 16], min_length=1)
    kernel_size: int = Field(default=3, ge=1)
    downsample_stages: int = Field(default=0, ge=0, description="2×2 average pools after the first stages")
    latent_channels: int = Field(default=16, ge=1)
    learning_rate: float = Field(default=1e-4, gt=0)
    batch_size: int = Field(default=32, ge=1)
    min_delta: float = Field(default=1e-4, gt=0)
    patience: int = Field(default=5, ge=1)
    validation_fraction: float = Field(default=0.3, gt=0, lt=1)
    patch_size: int = Field(default=32, ge=4)
    patches_per_image: int = Field(default=4, ge=1)
    max_epochs: int = Field(default=100, ge=1)
    seed: int = 0


class AugmentationConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    n_images: int = Field(default=300, ge=1)
    flip_probability: float = Field(default=0.5, ge=0, le=1)
    rotate90: bool = True
    max_free_rotation_deg: float = Field(default=0.0, ge=0, le=180)
    contrast_range: Tuple[float, float] = (0.8, 1.2)


# --- architecture ---

def build_autoencoder(config: AutoencoderConfig) -> Tuple[Sequential, int]:
    """Encoder convs, mirrored decoder, final 1×1 conv to RGB; returns (model, splice index)"""
    if config.downsample_stages > len(config.encoder_channels):
        raise ShapeMismatch("downsample_stages cannot exceed the number of encoder stages")
    rng = np.random.default_rng(config.seed)
    layers = []
    channels = 3
    for stage, width in enumerate(config.encoder_channels):
        layers += [Conv2D(channels, width, config.kernel_size, rng=rng), ReLU()]
        if stage < config.downsample_stages:
            layers.append(AvgPool2())
        channels = width

    decoder_widths = list(reversed(config.encoder_channels[:-1])) + [config.latent_channels]
    for stage, width in enumerate(decoder_widths):
        if len(decoder_widths) - stage <= config.downsample_stages:
            layers.append(Upsample2())
        layers += [Conv2D(channels, width, config.kernel_size, rng=rng), ReLU()]
        channels = width

    splice = len(layers)
    layers.append(Conv2D(channels, 3, 1, rng=rng))
    return Sequential(layers), splice


def to_input(color: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """(3, H, W) float input in [0, 1] with background zeroed"""
    color = np.asarray(color)
    mask = np.asarray(mask, dtype=bool)
    if color.shape[:2] != mask.shape or color.ndim != 3:
        raise ShapeMismatch(f"colour {color.shape} and mask {mask.shape} do not match")
    x = color.astype(np.float64).transpose(2, 0, 1) / 255.0
    return x * mask[None]


def _reconstruction_loss(model: Sequential, batch: List[Tuple[np.ndarray, np.ndarray]]):
    x = np.stack([sample[0] for sample in batch])
    masks = np.stack([sample[1] for sample in batch])
    out, caches = model.forward(x)
    loss, grad = masked_mse(out, x, masks)
    _, grads = model.backward(grad, caches)
    return loss, grads


def _validation_loss(model: Sequential, batch: List[Tuple[np.ndarray, np.ndarray]]) -> float:
    x = np.stack([sample[0] for sample in batch])
    masks = np.stack([sample[1] for sample in batch])
    return masked_mse(model.predict(x), x, masks)[0]


def reconstruction_error(model: Sequential, color: np.ndarray, mask: np.ndarray) -> float:
    """Masked MSE of the autoencoder on one image"""
    x = to_input(color, mask)[None]
    return masked_mse(model.predict(x), x, np.asarray(mask, dtype=bool)[None])[0]


# --- feature extractor ---

@dataclass(frozen=True, eq=False)
class FeatureExtractor:
    """Frozen encoder up to the splice; encode() gives (channels, H, W) features"""
    model: Sequential
    channels: int
    provenance: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_autoencoder(cls, model: Sequential, splice: int,
                         provenance: Optional[Dict[str, Any]] = None) -> "FeatureExtractor":
        layers = model.layers[:splice]
        params = {}
        for name, p in Sequential(layers).parameters().items():
            copy = np.array(p, copy=True)
            copy.setflags(write=False)
            params[name] = copy
        # cloned layers holding read-only copies: later autoencoder updates never reach them
        clone = Sequential([_clone_layer(layer) for layer in layers])
        clone.set_parameters(params)
        channels = next(layer.out_channels for layer in reversed(layers) if isinstance(layer, Conv2D))
        return cls(clone, channels, dict(provenance or {}))

    def encode(self, color: np.ndarray, mask: np.ndarray) -> np.ndarray:
        return self.model.predict(to_input(color, mask)[None])[0]

    def encode_input(self, x: np.ndarray) -> np.ndarray:
        """Features for an already prepared (N, 3, H, W) input"""
        return self.model.predict(x)

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for name, p in sorted(self.model.parameters().items()):
            digest.update(name.encode("utf-8"))
            digest.update(np.ascontiguousarray(p, dtype="<f8").tobytes())
        return digest.hexdigest()


def _clone_layer(layer):
    if isinstance(layer, Conv2D):
        clone = Conv2D(layer.in_channels, layer.out_channels, layer.kernel_size,
                       use_bias=layer.bias is not None)
        return clone
    return type(layer)()


@dataclass
class AutoencoderResult:
    extractor: FeatureExtractor
    model: Sequential
    splice: int
    config: AutoencoderConfig
    training: TrainingResult

    @property
    def final_val_loss(self) -> float:
        return self.training.best_val_loss


# --- corpus ---

def corpus_fingerprint(corpus: Sequence[Sample]) -> str:
    digest = hashlib.sha256()
    for color, mask, *_ in corpus:
        digest.update(np.ascontiguousarray(color, dtype=np.uint8).tobytes())
        digest.update(np.packbits(np.asarray(mask, dtype=bool)).tobytes())
    return digest.hexdigest()[:16]


def augment_sample(color: np.ndarray, mask: np.ndarray, rng: np.random.Generator,
                   config: AugmentationConfig, labels: Optional[np.ndarray] = None) -> Sample:
    """
    Random flips, rotation and contrast. The mask (and labels, when given)
    follow every geometric step; returns (color, mask) or (color, mask, labels).
    """
    color = np.asarray(color)
    grids = [np.asarray(mask, dtype=bool)]
    if labels is not None:
        grids.append(np.asarray(labels))

    if rng.random() < config.flip_probability:
        color, grids = color[:, ::-1], [g[:, ::-1] for g in grids]
    if rng.random() < config.flip_probability:
        color, grids = color[::-1], [g[::-1] for g in grids]
    if config.rotate90:
        k = int(rng.integers(4))
        color, grids = np.rot90(color, k, axes=(0, 1)), [np.rot90(g, k, axes=(0, 1)) for g in grids]
    if config.max_free_rotation_deg > 0:
        angle = rng.uniform(-config.max_free_rotation_deg, config.max_free_rotation_deg)
        color = ndimage.rotate(color, angle, axes=(1, 0), reshape=False, order=1, mode="constant")
        # nearest neighbour keeps hard labels; pixels rotated out of frame are dropped
        rotated = [ndimage.rotate(grids[0].astype(np.uint8), angle, axes=(1, 0), reshape=False,
                                  order=0, mode="constant") > 0]
        if labels is not None:
            rotated.append(ndimage.rotate(grids[1], angle, axes=(1, 0), reshape=False,
                                          order=0, mode="constant", cval=BACKGROUND))
        grids = rotated

    low, high = config.contrast_range
    scale = rng.uniform(low, high) if high > low else low
    work = color.astype(np.float64)
    mean = work.mean(axis=(0, 1), keepdims=True)
    work = mean + scale * (work - mean)
    color = np.clip(np.round(work), 0, 255).astype(np.uint8)
    return (np.ascontiguousarray(color),) + tuple(np.ascontiguousarray(g) for g in grids)


def build_training_corpus(base: Sequence[Sample], config: AugmentationConfig, seed: int) -> List[Sample]:
    """Exactly config.n_images augmented images, cycling through the base plates"""
    if not base:
        raise CorpusTooSmall("need at least one base plate")
    rng = np.random.default_rng(seed)
    corpus = []
    for i in range(config.n_images):
        color, mask, *labels = base[i % len(base)]
        corpus.append(augment_sample(color, mask, rng, config, labels[0] if labels else None))
    return corpus


def _sample_patches(corpus: Sequence[Sample], config: AutoencoderConfig,
                    rng: np.random.Generator) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Food-centred square patches as (input, mask) pairs"""
    patches = []
    for color, mask, *_ in corpus:
        mask = np.asarray(mask, dtype=bool)
        rows, cols = np.nonzero(mask)
        if rows.size == 0:
            raise EmptyMask("corpus image has no food pixels")
        x = to_input(color, mask)
        h, w = mask.shape
        size = min(config.patch_size, h, w)
        size -= size % (2 ** config.downsample_stages)
        for _ in range(config.patches_per_image):
            i = int(rng.integers(rows.size))
            top = min(max(rows[i] - size // 2, 0), h - size)
            left = min(max(cols[i] - size // 2, 0), w - size)
            patches.append((x[:, top:top + size, left:left + size], mask[top:top + size, left:left + size]))
    return patches


def split_corpus(corpus: Sequence[Sample], validation_fraction: float,
                 rng: np.random.Generator) -> Tuple[List[Sample], List[Sample]]:
    """Whole images to train or validation, never both; a single image serves as both"""
    if len(corpus) == 1:
        return list(corpus), list(corpus)
    order = rng.permutation(len(corpus))
    n_val = min(max(int(round(validation_fraction * len(corpus))), 1), len(corpus) - 1)
    return [corpus[i] for i in order[n_val:]], [corpus[i] for i in order[:n_val]]


def train_autoencoder(corpus: Sequence[Sample], config: AutoencoderConfig,
                      corpus_id: Optional[str] = None) -> AutoencoderResult:
    """Fit the autoencoder on masked reconstruction and cut the feature extractor"""
    if len(corpus) < config.batch_size:
        raise CorpusTooSmall(f"corpus has {len(corpus)} images, batch size is {config.batch_size}")

    rng = np.random.default_rng(config.seed)
    train_images, val_images = split_corpus(corpus, config.validation_fraction, rng)
    train_set = _sample_patches(train_images, config, rng)
    val_set = _sample_patches(val_images, config, rng)

    model, splice = build_autoencoder(config)
    logger.info("Training autoencoder: %d parameters, %d train / %d val patches",
                model.parameter_count(), len(train_set), len(val_set))
    training = run_training(
        model, train_set, val_set, _reconstruction_loss,
        AdamState(learning_rate=config.learning_rate),
        EarlyStopRule(config.min_delta, config.patience),
        config.max_epochs, config.batch_size, config.seed, evaluate=_validation_loss,
    )

    provenance = {
        "corpus_id": corpus_id or corpus_fingerprint(corpus),
        "seed": config.seed,
        "train_images": len(train_images),
        "val_images": len(val_images),
        "stop_epoch": training.stop_epoch,
        "best_epoch": training.best_epoch,
        "best_val_loss": training.best_val_loss,
    }
    extractor = FeatureExtractor.from_autoencoder(model, splice, provenance)
    return AutoencoderResult(extractor, model, splice, config, training)


# --- persistence ---

def save_autoencoder(path: Union[str, Path], result: AutoencoderResult) -> Path:
    metadata = {
        "kind": "autoencoder",
        "config": result.config.model_dump(mode="json"),
        "architecture": result.model.describe(),
        "splice_index": result.splice,
        "parameter_count": result.model.parameter_count(),
        "provenance": result.extractor.provenance,
        "extractor_sha256": result.extractor.checksum(),
        "optimizer": {"beta1": 0.9, "beta2": 0.999, "eps": 1e-8},
        "history": result.training.history,
    }
    return save_weights(path, result.model.parameters(), metadata)


def load_autoencoder(path: Union[str, Path]) -> Tuple[Sequential, FeatureExtractor]:
    params, metadata = load_weights(path)
    if metadata.get("kind") != "autoencoder":
        raise MissingModel(f"{path} is not an autoencoder weight file")
    config = AutoencoderConfig(**metadata["config"])
    model, splice = build_autoencoder(config)
    model.set_parameters(params)
    extractor = FeatureExtractor.from_autoencoder(model, splice, metadata.get("provenance"))
    logger.info("Loaded feature extractor from %s (sha256 %s)", path, extractor.checksum()[:12])
    return model, extractor


def load_feature_extractor(path: Union[str, Path]) -> FeatureExtractor:
    return load_autoencoder(path)[1]
