"""Forward/backward passes and SGD for small CONV/FC networks in numpy.

Architecture is fixed: every layer except the last is followed by ReLU;
CONV layers with ``pool=True`` add a 2x2/stride-2 max-pool (odd edges are
cropped). The loss is mean softmax cross-entropy.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .model import FC, Layer, Model
from .quantization import quantize_inputs

Gradients = List[Tuple[np.ndarray, np.ndarray]]


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass
class _LayerCache:
    x_shape: tuple
    cols: np.ndarray
    z_shape: tuple
    relu_mask: Optional[np.ndarray]
    pool_index: Optional[np.ndarray]
    pre_pool_shape: Optional[tuple]


def im2col(x: np.ndarray, kh: int, kw: int, stride: int = 1) -> np.ndarray:
    """Patches of ``x`` (N, C, H, W) as rows of shape ``(N, Ho, Wo, C*kh*kw)``."""
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho, wo, c * kh * kw)


def _col2im(dcols: np.ndarray, x_shape, kh, kw, stride) -> np.ndarray:
    n, c, h, w = x_shape
    _, ho, wo, _ = dcols.shape
    d = dcols.reshape(n, ho, wo, c, kh, kw)
    dx = np.zeros(x_shape)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += d[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    return dx


def maxpool2(x: np.ndarray):
    """2x2/stride-2 max-pool; also returns the flat argmax of each window."""
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    win = (
        x[:, :, : 2 * h2, : 2 * w2]
        .reshape(n, c, h2, 2, w2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h2, w2, 4)
    )
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx


def _maxpool2_backward(dout, idx, pre_shape):
    n, c, h, w = pre_shape
    h2, w2 = h // 2, w // 2
    win = np.zeros((n, c, h2, w2, 4))
    np.put_along_axis(win, idx[..., None], dout[..., None], axis=-1)
    dx = np.zeros(pre_shape)
    dx[:, :, : 2 * h2, : 2 * w2] = (
        win.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)
    )
    return dx


def layer_linear(layer: Layer, x: np.ndarray):
    """Affine part of one layer. Returns ``(z, cols)`` with ``z`` in NCHW."""
    f, c, kh, kw = layer.weights.shape
    if layer.kind == FC:
        x = x.reshape(x.shape[0], c, 1, 1)
    cols = im2col(x, kh, kw, layer.stride)
    z = cols @ layer.weights.reshape(f, -1).T + layer.biases
    return z.transpose(0, 3, 1, 2), cols


def layer_activation(z: np.ndarray, layer: Layer, last: bool):
    """ReLU (hidden layers) then optional max-pool."""
    relu_mask = pool_index = None
    a = z
    if not last:
        relu_mask = z > 0
        a = np.where(relu_mask, z, 0.0)
    if layer.pool and layer.kind != FC:
        a, pool_index = maxpool2(a)
    return a, relu_mask, pool_index


def _as_batch(model: Model, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x.reshape((x.shape[0],) + model.input_shape)


def forward(model: Model, x: np.ndarray, *, cache: bool = False):
    """Logits for a batch ``x`` of shape ``(N, C0, H0, W0)``.

    With ``cache=True`` returns ``(logits, caches)`` for :func:`backward`.
    """
    a = _as_batch(model, x)
    caches = []
    last = model.num_layers - 1
    for i, layer in enumerate(model.layers):
        x_shape = a.shape
        z, cols = layer_linear(layer, a)
        a, relu_mask, pool_index = layer_activation(z, layer, i == last)
        if cache:
            caches.append(_LayerCache(x_shape, cols, z.shape, relu_mask, pool_index, z.shape))
    logits = a.reshape(a.shape[0], -1)
    return (logits, caches) if cache else logits


def quantized_forward(model: Model, x: np.ndarray, *, return_levels: bool = False):
    """Reference forward pass of a quantized model.

    The input of every layer is snapped to that layer's unsigned input grid;
    weights are used as stored (they must already lie on their grid).
    """
    if not model.is_quantized:
        raise ValueError("model has no quantization spec")
    a = _as_batch(model, x)
    last = model.num_layers - 1
    levels = []
    for i, layer in enumerate(model.layers):
        k = quantize_inputs(a, layer.quant)
        levels.append(k)
        a = k * layer.quant.input_step
        z, _ = layer_linear(layer, a)
        a, _, _ = layer_activation(z, layer, i == last)
    logits = a.reshape(a.shape[0], -1)
    return (logits, levels) if return_levels else logits


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy(logits: np.ndarray, y: np.ndarray) -> float:
    lp = log_softmax(logits)
    return float(-lp[np.arange(len(y)), y].mean())


def backward(model: Model, logits: np.ndarray, caches, y: np.ndarray):
    """Mean cross-entropy and its gradients ``[(dW, db), ...]`` per layer."""
    y = np.asarray(y)
    n = len(y)
    lp = log_softmax(logits)
    loss = float(-lp[np.arange(n), y].mean())
    grad = np.exp(lp)
    grad[np.arange(n), y] -= 1.0
    grad /= n

    grads: Gradients = [None] * model.num_layers  # type: ignore[list-item]
    da = grad
    for i in range(model.num_layers - 1, -1, -1):
        layer, cache = model.layers[i], caches[i]
        f, c, kh, kw = layer.weights.shape
        if cache.pool_index is not None:
            da = da.reshape(cache.pool_index.shape)
            dz = _maxpool2_backward(da, cache.pool_index, cache.pre_pool_shape)
        else:
            dz = da.reshape(cache.z_shape)
        if cache.relu_mask is not None:
            dz = np.where(cache.relu_mask, dz, 0.0)
        dz_rows = dz.transpose(0, 2, 3, 1).reshape(-1, f)
        cols = cache.cols.reshape(dz_rows.shape[0], -1)
        dw = (dz_rows.T @ cols).reshape(layer.weights.shape)
        db = dz_rows.sum(axis=0)
        grads[i] = (dw, db)
        if i > 0:
            dcols = (dz_rows @ layer.weights.reshape(f, -1)).reshape(cache.cols.shape)
            if layer.kind == FC:
                da = dcols.reshape(cache.x_shape)
            else:
                da = _col2im(dcols, cache.x_shape, kh, kw, layer.stride)
    return loss, grads


def loss_and_gradients(model: Model, x: np.ndarray, y: np.ndarray):
    logits, caches = forward(model, x, cache=True)
    return backward(model, logits, caches, y)


def sgd_step(
    model: Model,
    grads: Gradients,
    learning_rate: float,
    masks: Optional[Sequence[Optional[np.ndarray]]] = None,
    *,
    velocity: Optional[list] = None,
    momentum: float = 0.0,
) -> Model:
    """In-place ``w -= lr * g`` on every layer; masked-off weights are left untouched."""
    for i, (layer, (dw, db)) in enumerate(zip(model.layers, grads)):
        if momentum and velocity is not None:
            vw, vb = velocity[i]
            vw *= momentum
            vw += dw
            vb *= momentum
            vb += db
            dw, db = vw, vb
        new_w = layer.weights - learning_rate * dw
        mask = masks[i] if masks is not None else None
        layer.weights = new_w if mask is None else np.where(mask, new_w, layer.weights)
        layer.biases = layer.biases - learning_rate * db
    return model


def init_velocity(model: Model) -> list:
    return [(np.zeros_like(l.weights), np.zeros_like(l.biases)) for l in model.layers]


def predict(model: Model, x: np.ndarray, batch_size: int = 1024) -> np.ndarray:
    out = [forward(model, x[i : i + batch_size]).argmax(axis=1) for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(model: Model, x: np.ndarray, y: np.ndarray) -> float:
    """Top-1 accuracy."""
    if len(y) == 0:
        raise ValueError("empty dataset")
    return float(np.mean(predict(model, x) == np.asarray(y)))


GradFn = Callable[[Model, np.ndarray, np.ndarray], Tuple[float, Gradients]]


def run_epoch(
    model: Model,
    x: np.ndarray,
    y: np.ndarray,
    *,
    learning_rate: float,
    batch_size: int,
    rng: np.random.Generator,
    grad_fn: GradFn = loss_and_gradients,
    masks=None,
    velocity=None,
    momentum: float = 0.0,
    max_steps: Optional[int] = None,
) -> float:
    """One shuffled pass of minibatch SGD; returns the mean minibatch loss."""
    order = rng.permutation(len(x))
    losses = []
    for step, start in enumerate(range(0, len(x), batch_size)):
        if max_steps is not None and step >= max_steps:
            break
        idx = order[start : start + batch_size]
        loss, grads = grad_fn(model, x[idx], y[idx])
        if not np.isfinite(loss):
            raise NonFiniteLoss(f"loss became {loss} at step {step}")
        sgd_step(model, grads, learning_rate, masks, velocity=velocity, momentum=momentum)
        losses.append(loss)
    return float(np.mean(losses)) if losses else float("nan")


def train(
    model: Model,
    x: np.ndarray,
    y: np.ndarray,
    *,
    epochs: int = 10,
    learning_rate: float = 0.05,
    batch_size: int = 32,
    momentum: float = 0.0,
    lr_decay: float = 1.0,
    seed: int = 0,
    masks=None,
    log: Optional[Callable[[dict], None]] = None,
) -> Model:
    """Plain (optionally momentum) minibatch SGD, in place."""
    rng = np.random.default_rng(seed)
    velocity = init_velocity(model) if momentum else None
    lr = learning_rate
    for epoch in range(epochs):
        loss = run_epoch(
            model, x, y, learning_rate=lr, batch_size=batch_size, rng=rng,
            masks=masks, velocity=velocity, momentum=momentum,
        )
        if log is not None:
            log({"phase": "train", "epoch": epoch, "loss": loss, "lr": lr})
        lr *= lr_decay
    return model
