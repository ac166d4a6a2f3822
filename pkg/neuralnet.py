"""
Small deterministic neural-network engine on numpy.

Tensors are float64 arrays shaped (batch, channels, height, width).
Layers are stateless: forward returns (output, cache) and backward consumes
the cache, so one model can serve several threads at inference time.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import DataError, DivergenceDetected, EmptyMask, LabelOutOfRange, ShapeMismatch

logger = logging.getLogger(__name__)

Params = Dict[str, np.ndarray]


def _ensure_finite(x: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise DivergenceDetected(f"non-finite values after {where}")
    return x


def _check_tensor4(x: np.ndarray, name: str):
    if x.ndim != 4:
        raise ShapeMismatch(f"{name} must be (N, C, H, W), got shape {x.shape}")


# --- convolution ---

def conv2d_forward(x: np.ndarray, kernels: np.ndarray, bias: Optional[np.ndarray] = None,
                   stride: int = 1, padding: int = 0) -> np.ndarray:
    """Cross-correlation; kernels are (C_out, C_in, kh, kw)"""
    _check_tensor4(x, "input")
    _check_tensor4(kernels, "kernels")
    n, c_in, h, w = x.shape
    c_out, k_in, kh, kw = kernels.shape
    if k_in != c_in:
        raise ShapeMismatch(f"input has {c_in} channels, kernels expect {k_in}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeMismatch(f"bias shape {bias.shape} != ({c_out},)")
    if stride < 1 or padding < 0:
        raise ShapeMismatch("stride must be >= 1 and padding >= 0")

    h_out = (h + 2 * padding - kh) // stride + 1
    w_out = (w + 2 * padding - kw) // stride + 1
    if h_out < 1 or w_out < 1:
        raise ShapeMismatch(f"kernel {kh}×{kw} larger than padded input {h}×{w}")

    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    out = np.zeros((n, h_out, w_out, c_out))
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i:i + stride * h_out:stride, j:j + stride * w_out:stride]
            out += np.tensordot(patch, kernels[:, :, i, j], axes=([1], [1]))
    out = out.transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias[None, :, None, None]
    return _ensure_finite(np.ascontiguousarray(out), "conv2d")


def conv2d_backward(grad_out: np.ndarray, x: np.ndarray, kernels: np.ndarray,
                    stride: int = 1, padding: int = 0) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (input, kernels, bias) of conv2d_forward"""
    _check_tensor4(grad_out, "grad_out")
    n, c_in, h, w = x.shape
    c_out, _, kh, kw = kernels.shape
    h_out = (h + 2 * padding - kh) // stride + 1
    w_out = (w + 2 * padding - kw) // stride + 1
    if grad_out.shape != (n, c_out, h_out, w_out):
        raise ShapeMismatch(f"grad_out {grad_out.shape} != {(n, c_out, h_out, w_out)}")

    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    grad_xp = np.zeros_like(xp, dtype=np.float64)
    grad_k = np.zeros_like(kernels, dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            rows = slice(i, i + stride * h_out, stride)
            cols = slice(j, j + stride * w_out, stride)
            patch = xp[:, :, rows, cols]
            grad_k[:, :, i, j] = np.tensordot(grad_out, patch, axes=([0, 2, 3], [0, 2, 3]))
            grad_xp[:, :, rows, cols] += np.tensordot(
                grad_out, kernels[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)

    grad_x = grad_xp[:, :, padding:padding + h, padding:padding + w] if padding else grad_xp
    grad_b = grad_out.sum(axis=(0, 2, 3))
    return np.ascontiguousarray(grad_x), grad_k, grad_b


# --- pointwise and resampling ---

def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    return grad_out * (x > 0)


def avg_pool2_forward(x: np.ndarray) -> np.ndarray:
    _check_tensor4(x, "input")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeMismatch(f"2×2 pooling needs even height and width, got {h}×{w}")
    return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def avg_pool2_backward(grad_out: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(grad_out, 2, axis=2), 2, axis=3) / 4.0


def upsample2_forward(x: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)


def upsample2_backward(grad_out: np.ndarray) -> np.ndarray:
    n, c, h, w = grad_out.shape
    return grad_out.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


# --- losses ---

def _channel_mask(mask: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """(N, H, W) or (N, 1, H, W) boolean mask broadcast to (N, C, H, W)"""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 3:
        mask = mask[:, None]
    if mask.shape[0] != shape[0] or mask.shape[2:] != shape[2:] or mask.shape[1] not in (1, shape[1]):
        raise ShapeMismatch(f"mask {mask.shape} does not fit tensor {shape}")
    return np.broadcast_to(mask, shape)


def masked_mse(prediction: np.ndarray, target: np.ndarray, mask: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean squared error over masked (pixel, channel) elements, with its gradient"""
    if prediction.shape != target.shape:
        raise ShapeMismatch(f"prediction {prediction.shape} != target {target.shape}")
    _check_tensor4(prediction, "prediction")
    full = _channel_mask(mask, prediction.shape)
    count = int(full.sum())
    if count == 0:
        raise EmptyMask("no masked pixels")
    diff = np.where(full, prediction - target, 0.0)
    loss = float(np.sum(diff * diff)) / count
    return loss, 2.0 * diff / count


def masked_cross_entropy(logits: np.ndarray, labels: np.ndarray,
                         mask: np.ndarray) -> Tuple[float, np.ndarray]:
    """Softmax cross-entropy averaged over masked pixels; labels are (N, H, W) class ids"""
    _check_tensor4(logits, "logits")
    n, n_classes, h, w = logits.shape
    labels = np.asarray(labels)
    mask = np.asarray(mask, dtype=bool)
    if labels.shape != (n, h, w) or mask.shape != (n, h, w):
        raise ShapeMismatch(f"labels {labels.shape} / mask {mask.shape} do not fit logits {logits.shape}")
    count = int(mask.sum())
    if count == 0:
        raise EmptyMask("no masked pixels")
    picked = labels[mask]
    if picked.min() < 0 or picked.max() >= n_classes:
        raise LabelOutOfRange(f"labels must be in [0, {n_classes}) on masked pixels")

    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_prob = shifted - log_norm

    safe_labels = np.where(mask, labels, 0).astype(np.intp)
    picked_log_prob = np.take_along_axis(log_prob, safe_labels[:, None], axis=1)[:, 0]
    loss = -float(np.sum(picked_log_prob[mask])) / count

    grad = np.exp(log_prob)
    np.put_along_axis(grad, safe_labels[:, None],
                      np.take_along_axis(grad, safe_labels[:, None], axis=1) - 1.0, axis=1)
    grad *= mask[:, None] / count
    return loss, grad


# --- layers ---

def glorot_uniform(shape: Tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    """Uniform in ±sqrt(6 / (fan_in + fan_out)) for (C_out, C_in, kh, kw) kernels"""
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Layer:
    name = "layer"

    def params(self) -> Params:
        return {}

    def set_params(self, params: Params):
        pass

    def forward(self, x: np.ndarray) -> Tuple[np.ndarray, Any]:
        raise NotImplementedError

    def backward(self, grad_out: np.ndarray, cache: Any) -> Tuple[np.ndarray, Params]:
        raise NotImplementedError

    def describe(self) -> Dict[str, Any]:
        return {"type": self.name}


class Conv2D(Layer):
    name = "conv2d"

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3,
                 use_bias: bool = True, rng: Optional[np.random.Generator] = None):
        rng = rng or np.random.default_rng(0)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.padding = kernel_size // 2  # "same" for odd kernels
        self.weight = glorot_uniform((out_channels, in_channels, kernel_size, kernel_size), rng)
        self.bias = np.zeros(out_channels) if use_bias else None

    def params(self) -> Params:
        params = {"weight": self.weight}
        if self.bias is not None:
            params["bias"] = self.bias
        return params

    def set_params(self, params: Params):
        if params["weight"].shape != self.weight.shape:
            raise ShapeMismatch(f"weight {params['weight'].shape} != {self.weight.shape}")
        self.weight = params["weight"]
        if self.bias is not None:
            self.bias = params["bias"]

    def forward(self, x):
        return conv2d_forward(x, self.weight, self.bias, 1, self.padding), x

    def backward(self, grad_out, cache):
        grad_x, grad_w, grad_b = conv2d_backward(grad_out, cache, self.weight, 1, self.padding)
        grads = {"weight": grad_w}
        if self.bias is not None:
            grads["bias"] = grad_b
        return grad_x, grads

    def describe(self):
        return {"type": self.name, "in_channels": self.in_channels, "out_channels": self.out_channels,
                "kernel_size": self.kernel_size, "use_bias": self.bias is not None}


class ReLU(Layer):
    name = "relu"

    def forward(self, x):
        return relu_forward(x), x

    def backward(self, grad_out, cache):
        return relu_backward(grad_out, cache), {}


class AvgPool2(Layer):
    name = "avgpool2"

    def forward(self, x):
        return avg_pool2_forward(x), None

    def backward(self, grad_out, cache):
        return avg_pool2_backward(grad_out), {}


class Upsample2(Layer):
    name = "upsample2"

    def forward(self, x):
        return upsample2_forward(x), None

    def backward(self, grad_out, cache):
        return upsample2_backward(grad_out), {}


class Sequential:
    """Ordered layers with flat '<index>.<name>' parameter naming"""

    def __init__(self, layers: Sequence[Layer]):
        self.layers = list(layers)

    def forward(self, x: np.ndarray, upto: Optional[int] = None) -> Tuple[np.ndarray, List[Any]]:
        caches = []
        for layer in self.layers[:upto]:
            x, cache = layer.forward(x)
            caches.append(cache)
        return x, caches

    def predict(self, x: np.ndarray, upto: Optional[int] = None) -> np.ndarray:
        return self.forward(x, upto)[0]

    def backward(self, grad_out: np.ndarray, caches: List[Any]) -> Tuple[np.ndarray, Params]:
        grads = {}
        for index in reversed(range(len(caches))):
            grad_out, layer_grads = self.layers[index].backward(grad_out, caches[index])
            for name, g in layer_grads.items():
                grads[f"{index}.{name}"] = g
        return grad_out, grads

    def parameters(self) -> Params:
        return {f"{i}.{name}": p for i, layer in enumerate(self.layers)
                for name, p in layer.params().items()}

    def set_parameters(self, params: Params):
        expected = self.parameters()
        if set(params) != set(expected):
            raise ShapeMismatch(f"parameter names differ: {sorted(set(params) ^ set(expected))}")
        for i, layer in enumerate(self.layers):
            own = {name: params[f"{i}.{name}"] for name in layer.params()}
            if own:
                layer.set_params(own)

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.parameters().values()))

    def describe(self) -> List[Dict[str, Any]]:
        return [layer.describe() for layer in self.layers]


# --- optimisation ---

@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: Params = field(default_factory=dict)
    second_moment: Params = field(default_factory=dict)


def adam_step(params: Params, grads: Params, state: AdamState) -> Params:
    """Bias-corrected Adam update; returns new parameter arrays and advances state"""
    if set(params) != set(grads):
        raise ShapeMismatch(f"parameters and gradients differ: {sorted(set(params) ^ set(grads))}")
    state.step += 1
    t = state.step
    updated = {}
    for name in sorted(params):
        p, g = params[name], grads[name]
        if p.shape != g.shape:
            raise ShapeMismatch(f"{name}: parameter {p.shape} vs gradient {g.shape}")
        m = state.first_moment.get(name, np.zeros_like(p))
        v = state.second_moment.get(name, np.zeros_like(p))
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * v + (1 - state.beta2) * g * g
        state.first_moment[name], state.second_moment[name] = m, v
        m_hat = m / (1 - state.beta1 ** t)
        v_hat = v / (1 - state.beta2 ** t)
        updated[name] = p - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
    return updated


@dataclass(frozen=True)
class EarlyStopRule:
    """Stop once the best validation loss has not improved by min_delta for `patience` epochs"""
    min_delta: float = 1e-4
    patience: int = 5

    def __post_init__(self):
        if not self.min_delta > 0:
            raise DataError("min_delta must be > 0")
        if self.patience < 1:
            raise DataError("patience must be >= 1")


@dataclass
class TrainingResult:
    params: Params
    history: List[Dict[str, float]]
    best_epoch: int
    best_val_loss: float
    stop_epoch: int
    stopped_early: bool


def _batches(items: Sequence[Any], batch_size: int, order: Optional[np.ndarray] = None):
    indices = range(len(items)) if order is None else order
    indices = list(indices)
    for start in range(0, len(indices), batch_size):
        yield [items[i] for i in indices[start:start + batch_size]]


def run_training(model, train_set: Sequence[Any], val_set: Sequence[Any],
                 loss_and_grad: Callable[[Any, List[Any]], Tuple[float, Params]],
                 optimizer: AdamState, rule: EarlyStopRule, max_epochs: int,
                 batch_size: int = 32, seed: int = 0,
                 evaluate: Optional[Callable[[Any, List[Any]], float]] = None) -> TrainingResult:
    """
    Mini-batch training with best-so-far early stopping.
    `model` exposes parameters()/set_parameters(); it ends holding the best snapshot.
    """
    if not train_set or not val_set:
        raise DataError("training and validation splits must be non-empty")
    if max_epochs < 1:
        raise DataError("max_epochs must be >= 1")
    evaluate = evaluate or (lambda m, batch: loss_and_grad(m, batch)[0])
    rng = np.random.default_rng(seed)

    best_params = {k: v.copy() for k, v in model.parameters().items()}
    best_val = math.inf
    best_epoch = 0
    rule_best = math.inf
    wait = 0
    history = []
    epoch = 0
    stopped_early = False

    for epoch in range(1, max_epochs + 1):
        train_losses, train_weights = [], []
        for batch in _batches(train_set, batch_size, rng.permutation(len(train_set))):
            loss, grads = loss_and_grad(model, batch)
            if not math.isfinite(loss):
                raise DivergenceDetected(f"training loss is {loss} at epoch {epoch}")
            model.set_parameters(adam_step(model.parameters(), grads, optimizer))
            train_losses.append(loss)
            train_weights.append(len(batch))

        val_losses, val_weights = [], []
        for batch in _batches(val_set, batch_size):
            val_losses.append(evaluate(model, batch))
            val_weights.append(len(batch))
        val_loss = float(np.average(val_losses, weights=val_weights))
        if not math.isfinite(val_loss):
            raise DivergenceDetected(f"validation loss is {val_loss} at epoch {epoch}")
        train_loss = float(np.average(train_losses, weights=train_weights))
        history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss})
        logger.debug("epoch %d: train %.6g val %.6g", epoch, train_loss, val_loss)

        if val_loss < best_val:
            best_val, best_epoch = val_loss, epoch
            best_params = {k: v.copy() for k, v in model.parameters().items()}

        if rule_best - val_loss >= rule.min_delta:
            rule_best = val_loss
            wait = 0
        else:
            wait += 1
            if wait >= rule.patience:
                stopped_early = True
                break

    model.set_parameters(best_params)
    logger.info("Training stopped at epoch %d (best epoch %d, val loss %.6g)", epoch, best_epoch, best_val)
    return TrainingResult(best_params, history, best_epoch, best_val, epoch, stopped_early)
