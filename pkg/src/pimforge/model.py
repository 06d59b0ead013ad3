"""Network container, per-layer weight tensors and the JSON model format.

Every layer is stored as a 4-D ``(F, C, H, W)`` tensor. Fully connected
layers use ``H = W = 1`` so pruning, mapping and bit-serial execution share
one code path.
"""
from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

MODEL_FORMAT = "pimforge-model/1"

CONV = "conv"
FC = "fc"


class ModelError(ValueError):
    """Raised for malformed model files or invariant violations."""


@dataclass(frozen=True)
class QuantSpec:
    """Fixed-point format of one layer.

    ``weight_bits`` counts the sign bit for signed weights, so a signed 8-bit
    grid has 255 levels. Inputs are unsigned with ``input_bits`` magnitude
    bits and ``input_frac_bits`` fractional bits.
    """

    weight_bits: int = 8
    input_bits: int = 8
    frac_bits: int = 6
    signed: bool = True
    input_frac_bits: int = 5

    def __post_init__(self):
        for name in ("weight_bits", "input_bits"):
            v = getattr(self, name)
            if not 1 <= v <= 16:
                raise ModelError(f"{name}={v} outside [1, 16]")
        if self.signed and self.weight_bits < 2:
            raise ModelError("signed weights need at least 2 bits")
        if not 0 <= self.frac_bits < self.weight_bits:
            raise ModelError(
                f"frac_bits={self.frac_bits} must be in [0, weight_bits={self.weight_bits})"
            )
        if not 0 <= self.input_frac_bits <= self.input_bits:
            raise ModelError(
                f"input_frac_bits={self.input_frac_bits} must be in [0, input_bits]"
            )

    @property
    def magnitude_bits(self) -> int:
        return self.weight_bits - 1 if self.signed else self.weight_bits

    @property
    def weight_step(self) -> float:
        return 2.0 ** -self.frac_bits

    @property
    def input_step(self) -> float:
        return 2.0 ** -self.input_frac_bits

    @property
    def max_weight_level(self) -> int:
        return 2 ** self.magnitude_bits - 1

    @property
    def max_input_level(self) -> int:
        return 2 ** self.input_bits - 1

    def to_dict(self) -> dict:
        return {
            "weight_bits": self.weight_bits,
            "input_bits": self.input_bits,
            "frac_bits": self.frac_bits,
            "signed": self.signed,
            "input_frac_bits": self.input_frac_bits,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QuantSpec":
        return cls(
            weight_bits=int(d["weight_bits"]),
            input_bits=int(d["input_bits"]),
            frac_bits=int(d["frac_bits"]),
            signed=bool(d.get("signed", True)),
            input_frac_bits=int(d.get("input_frac_bits", 0)),
        )


@dataclass(frozen=True)
class LayerShape:
    filters: int
    channels: int
    kernel_h: int = 1
    kernel_w: int = 1
    stride: int = 1
    layer_kind: str = CONV

    def __post_init__(self):
        for name in ("filters", "channels", "kernel_h", "kernel_w", "stride"):
            if int(getattr(self, name)) < 1:
                raise ModelError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.layer_kind not in (CONV, FC):
            raise ModelError(f"unknown layer kind {self.layer_kind!r}")
        if self.layer_kind == FC and (self.kernel_h, self.kernel_w) != (1, 1):
            raise ModelError("FC layers must have a 1x1 kernel")

    @property
    def dims(self) -> Tuple[int, int, int, int]:
        return (self.filters, self.channels, self.kernel_h, self.kernel_w)

    @property
    def size(self) -> int:
        return self.filters * self.channels * self.kernel_h * self.kernel_w


@dataclass
class Layer:
    """Weights, biases and the architecture flags of one layer.

    ``pool`` requests a 2x2/stride-2 max-pool after the activation.
    """

    weights: np.ndarray
    biases: np.ndarray
    kind: str = CONV
    stride: int = 1
    pool: bool = False
    quant: Optional[QuantSpec] = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.biases = np.asarray(self.biases, dtype=np.float64).reshape(-1)
        if self.weights.ndim != 4:
            raise ModelError(f"weights must be 4-D (F, C, H, W), got shape {self.weights.shape}")

    @property
    def shape(self) -> LayerShape:
        return LayerShape(*self.weights.shape, stride=self.stride, layer_kind=self.kind)

    def copy(self) -> "Layer":
        return replace(self, weights=self.weights.copy(), biases=self.biases.copy())


@dataclass
class Model:
    layers: List[Layer]
    input_shape: Tuple[int, int, int]
    seed: Optional[int] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def num_conv_layers(self) -> int:
        n = 0
        for layer in self.layers:
            if layer.kind != CONV:
                break
            n += 1
        return n

    @property
    def num_classes(self) -> int:
        return self.layers[-1].weights.shape[0]

    @property
    def quant_spec(self) -> List[Optional[QuantSpec]]:
        return [layer.quant for layer in self.layers]

    @property
    def is_quantized(self) -> bool:
        return all(layer.quant is not None for layer in self.layers)

    def copy(self) -> "Model":
        return Model([l.copy() for l in self.layers], self.input_shape, self.seed, dict(self.meta))

    def activation_shapes(self) -> List[Tuple[int, int, int]]:
        """Input shape ``(C, H, W)`` seen by each layer, plus the final output shape."""
        shapes = []
        c, h, w = self.input_shape
        for i, layer in enumerate(self.layers):
            f, cin, kh, kw = layer.weights.shape
            if layer.kind == FC:
                if c * h * w != cin:
                    raise ModelError(
                        f"layer {i}: FC expects {cin} inputs, previous layer provides {c}x{h}x{w}"
                    )
                shapes.append((cin, 1, 1))
                c, h, w = f, 1, 1
                continue
            if cin != c:
                raise ModelError(f"layer {i}: expects {cin} input channels, got {c}")
            if kh > h or kw > w:
                raise ModelError(f"layer {i}: kernel {kh}x{kw} larger than input {h}x{w}")
            shapes.append((c, h, w))
            h = (h - kh) // layer.stride + 1
            w = (w - kw) // layer.stride + 1
            if layer.pool:
                h, w = h // 2, w // 2
                if h < 1 or w < 1:
                    raise ModelError(f"layer {i}: pooling reduces the feature map to nothing")
            c = f
        shapes.append((c, h, w))
        return shapes

    def validate(self) -> "Model":
        if not self.layers:
            raise ModelError("model has no layers")
        if self.num_conv_layers < 1:
            raise ModelError("the first layer must be a CONV layer")
        seen_fc = False
        for i, layer in enumerate(self.layers):
            try:
                layer.shape
            except ModelError as exc:
                raise ModelError(f"layer {i}: {exc}") from None
            if layer.kind == FC:
                seen_fc = True
            elif seen_fc:
                raise ModelError(f"layer {i}: CONV layer after an FC layer")
            if layer.biases.shape[0] != layer.weights.shape[0]:
                raise ModelError(
                    f"layer {i}: bias length {layer.biases.shape[0]} != filters {layer.weights.shape[0]}"
                )
            if not np.all(np.isfinite(layer.weights)) or not np.all(np.isfinite(layer.biases)):
                raise ModelError(f"layer {i}: non-finite weight or bias")
        self.activation_shapes()
        return self


def conv_layer(filters, channels, kernel, *, stride=1, pool=False, rng=None) -> Layer:
    """He-initialised CONV layer."""
    rng = np.random.default_rng(rng)
    kh, kw = (kernel, kernel) if np.isscalar(kernel) else kernel
    fan_in = channels * kh * kw
    w = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(filters, channels, kh, kw))
    return Layer(w, np.zeros(filters), CONV, stride, pool)


def fc_layer(out_features, in_features, *, rng=None) -> Layer:
    rng = np.random.default_rng(rng)
    w = rng.normal(0.0, math.sqrt(2.0 / in_features), size=(out_features, in_features, 1, 1))
    return Layer(w, np.zeros(out_features), FC)


def build_network(
    input_shape: Sequence[int],
    conv: Sequence[Tuple[int, int]],
    n_classes: int,
    *,
    hidden: Sequence[int] = (),
    pool: bool = True,
    seed: int = 0,
) -> Model:
    """Create a freshly initialised CONV* -> FC* network.

    ``conv`` lists ``(filters, kernel_size)`` pairs; every CONV layer is
    followed by ReLU and, when ``pool`` is set, a 2x2 max-pool.
    """
    rng = np.random.default_rng(seed)
    layers = []
    c = input_shape[0]
    for filters, k in conv:
        layers.append(conv_layer(filters, c, k, pool=pool, rng=rng))
        c = filters
    model = Model(layers, tuple(input_shape), seed=seed)
    fc_in = int(np.prod(model.activation_shapes()[-1]))
    for width in list(hidden) + [n_classes]:
        model.layers.append(fc_layer(width, fc_in, rng=rng))
        fc_in = width
    return model.validate()


# -- serialization ---------------------------------------------------------


def model_to_dict(model: Model) -> dict:
    model.validate()
    layers = []
    for layer in model.layers:
        f, c, h, w = layer.weights.shape
        layers.append(
            {
                "kind": layer.kind,
                "filters": f,
                "channels": c,
                "kernel_h": h,
                "kernel_w": w,
                "stride": layer.stride,
                "pool": layer.pool,
                "quant": layer.quant.to_dict() if layer.quant else None,
                "biases": [float(v) for v in layer.biases],
                "weights": [float(v) for v in layer.weights.ravel()],
            }
        )
    return {
        "format": MODEL_FORMAT,
        "seed": model.seed,
        "input_shape": list(model.input_shape),
        "num_layers": model.num_layers,
        "num_conv_layers": model.num_conv_layers,
        "meta": model.meta,
        "layers": layers,
    }


def model_from_dict(doc: dict) -> Model:
    if doc.get("format") != MODEL_FORMAT:
        raise ModelError(f"unsupported model format {doc.get('format')!r}")
    layers = []
    for i, d in enumerate(doc["layers"]):
        try:
            dims = (int(d["filters"]), int(d["channels"]), int(d["kernel_h"]), int(d["kernel_w"]))
            values = np.asarray(d["weights"], dtype=np.float64)
            if values.size != math.prod(dims):
                raise ModelError(f"{values.size} weight values for shape {dims}")
            quant = QuantSpec.from_dict(d["quant"]) if d.get("quant") else None
            layers.append(
                Layer(
                    values.reshape(dims),
                    d["biases"],
                    d.get("kind", CONV),
                    int(d.get("stride", 1)),
                    bool(d.get("pool", False)),
                    quant,
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ModelError(f"layer {i}: {exc}") from None
    model = Model(layers, tuple(doc["input_shape"]), doc.get("seed"), dict(doc.get("meta") or {}))
    model.validate()
    for key, actual in (("num_layers", model.num_layers), ("num_conv_layers", model.num_conv_layers)):
        if key in doc and int(doc[key]) != actual:
            raise ModelError(f"header {key}={doc[key]} but the layer list gives {actual}")
    return model


def dump_json(doc, path) -> None:
    """Write ``doc`` atomically with a stable key order."""
    text = json.dumps(doc, indent=1, sort_keys=True, allow_nan=False) + "\n"
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".json")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ModelError(f"{path}: malformed JSON ({exc})") from None


def save_model(model: Model, path) -> None:
    dump_json(model_to_dict(model), path)


def load_model(path) -> Model:
    doc = load_json(path)
    if not isinstance(doc, dict):
        raise ModelError(f"{path}: expected a JSON object")
    return model_from_dict(doc)


def models_equal(a: Model, b: Model) -> bool:
    if a.input_shape != b.input_shape or a.num_layers != b.num_layers:
        return False
    for la, lb in zip(a.layers, b.layers):
        if (la.kind, la.stride, la.pool, la.quant) != (lb.kind, lb.stride, lb.pool, lb.quant):
            return False
        if la.weights.shape != lb.weights.shape:
            return False
        if not (np.array_equal(la.weights, lb.weights) and np.array_equal(la.biases, lb.biases)):
            return False
    return True


# -- sparsity accounting ---------------------------------------------------


@dataclass
class LayerSparsity:
    layer: int
    kind: str
    nonzero_filters: int
    nonzero_channels: int
    nonzero_kernels: int
    nonzero_weights: int
    total_weights: int


@dataclass
class SparsityReport:
    layers: List[LayerSparsity]

    @property
    def conv_total(self) -> int:
        return sum(l.total_weights for l in self.layers if l.kind == CONV)

    @property
    def conv_nonzero(self) -> int:
        return sum(l.nonzero_weights for l in self.layers if l.kind == CONV)

    @property
    def compression_rate(self) -> float:
        nz = self.conv_nonzero
        return self.conv_total / nz if nz else math.inf

    def to_dict(self) -> dict:
        return {
            "layers": [vars(l) for l in self.layers],
            "conv_total_weights": self.conv_total,
            "conv_nonzero_weights": self.conv_nonzero,
            "conv_compression_rate": round(self.compression_rate, 1),
        }

    def __str__(self) -> str:
        lines = ["layer kind  filters channels kernels  nonzero/total"]
        for l in self.layers:
            lines.append(
                f"{l.layer:5d} {l.kind:4s} {l.nonzero_filters:8d} {l.nonzero_channels:8d}"
                f" {l.nonzero_kernels:7d}  {l.nonzero_weights}/{l.total_weights}"
            )
        lines.append(f"CONV compression rate: {self.compression_rate:.1f}x")
        return "\n".join(lines)


def sparsity_report(model: Model) -> SparsityReport:
    rows = []
    for i, layer in enumerate(model.layers):
        nz = layer.weights != 0
        rows.append(
            LayerSparsity(
                layer=i,
                kind=layer.kind,
                nonzero_filters=int(nz.any(axis=(1, 2, 3)).sum()),
                nonzero_channels=int(nz.any(axis=(0, 2, 3)).sum()),
                nonzero_kernels=int(nz.any(axis=(2, 3)).sum()),
                nonzero_weights=int(nz.sum()),
                total_weights=int(nz.size),
            )
        )
    return SparsityReport(rows)
