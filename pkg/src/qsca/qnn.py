"""Minimal quantized inference engine with operand logging.

The engine executes int8-weight networks the way a small sequential device
would: int8 activations, 32-bit accumulators, bias addition, power-of-two
requantization (arithmetic right shift), clamp back to int8. Every
multiplication and every bias addition is observable, which is exactly the
surface a side-channel attacker sees.

Supported layer kinds: dense, conv2d, relu, avgpool2d, flatten. The final
layer of a network, when parameterized, emits unshifted int32 scores.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from .errors import AccumulatorOverflowError, DimensionError

INT8_MIN, INT8_MAX = -128, 127
WEIGHT_MIN, WEIGHT_MAX = -127, 127
INT32_MIN, INT32_MAX = -(1 << 31), (1 << 31) - 1
DEFAULT_BIAS_RANGE = (-2048, 2047)

PARAMETERIZED_KINDS = ("dense", "conv2d")
LAYER_KINDS = ("dense", "conv2d", "relu", "avgpool2d", "flatten")


@dataclass(frozen=True)
class Layer:
    """One network layer; parameter arrays are None for parameterless kinds."""

    kind: str
    weights: np.ndarray | None = None
    biases: np.ndarray | None = None
    requant_shift: int = 0
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    pool: tuple[int, int] | None = None

    @property
    def parameterized(self) -> bool:
        return self.kind in PARAMETERIZED_KINDS

    @property
    def weight_count(self) -> int:
        return 0 if self.weights is None else int(self.weights.size)

    @property
    def bias_count(self) -> int:
        return 0 if self.biases is None else int(self.biases.size)


def dense(weights, biases, requant_shift: int = 0) -> Layer:
    """Fully connected layer; weights shaped (out, in)."""
    w = _check_weights(np.asarray(weights), 2)
    b = _check_biases(np.asarray(biases), w.shape[0])
    return Layer("dense", weights=w, biases=b, requant_shift=_check_shift(requant_shift))


def conv2d(weights, biases, stride=(1, 1), padding=(0, 0), requant_shift: int = 0) -> Layer:
    """2-D convolution; weights shaped (out_c, in_c, kh, kw)."""
    w = _check_weights(np.asarray(weights), 4)
    b = _check_biases(np.asarray(biases), w.shape[0])
    stride = _pair(stride, "stride")
    padding = _pair(padding, "padding")
    if min(stride) < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    if min(padding) < 0:
        raise ValueError(f"padding must be non-negative, got {padding}")
    return Layer(
        "conv2d",
        weights=w,
        biases=b,
        requant_shift=_check_shift(requant_shift),
        stride=stride,
        padding=padding,
    )


def relu() -> Layer:
    return Layer("relu")


def avgpool2d(pool) -> Layer:
    """Non-overlapping average pooling; each window is summed then
    floor-divided by the window area."""
    pool = _pair(pool, "pool")
    if min(pool) < 1:
        raise ValueError(f"pool window must be positive, got {pool}")
    return Layer("avgpool2d", pool=pool)


def flatten() -> Layer:
    return Layer("flatten")


def _check_weights(w: np.ndarray, ndim: int) -> np.ndarray:
    if w.ndim != ndim:
        raise DimensionError(f"expected {ndim}-D weights, got shape {w.shape}")
    if w.size == 0:
        raise DimensionError("empty weight tensor")
    if w.min() < WEIGHT_MIN or w.max() > WEIGHT_MAX:
        raise ValueError(f"weights must lie in [{WEIGHT_MIN}, {WEIGHT_MAX}]")
    return w.astype(np.int8)


def _check_biases(b: np.ndarray, count: int) -> np.ndarray:
    if b.shape != (count,):
        raise DimensionError(f"expected {count} biases, got shape {b.shape}")
    if b.min() < INT32_MIN or b.max() > INT32_MAX:
        raise ValueError("biases must fit in 32 bits")
    return b.astype(np.int32)


def _check_shift(shift: int) -> int:
    shift = int(shift)
    if shift < 0:
        raise ValueError(f"requant_shift must be non-negative, got {shift}")
    return shift


def _pair(value, name) -> tuple[int, int]:
    if isinstance(value, int):
        return (value, value)
    a, b = value
    return (int(a), int(b))


@dataclass(frozen=True)
class QuantizedModel:
    """An ordered stack of layers plus the expected input shape."""

    layers: tuple[Layer, ...]
    input_shape: tuple[int, ...]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        if not any(layer.parameterized for layer in self.layers):
            raise ValueError("model needs at least one parameterized layer")
        # Raises on incompatible adjacent shapes.
        self.layer_input_shapes()

    def layer_input_shapes(self) -> list[tuple[int, ...]]:
        """Input shape of every layer, checking adjacent compatibility."""
        shapes = []
        shape = self.input_shape
        for index, layer in enumerate(self.layers):
            shapes.append(shape)
            shape = _output_shape(layer, shape, index)
        return shapes

    @property
    def output_shape(self) -> tuple[int, ...]:
        shape = self.input_shape
        for index, layer in enumerate(self.layers):
            shape = _output_shape(layer, shape, index)
        return shape

    def parameterized_indices(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if layer.parameterized]

    def parameter_count(self) -> int:
        return sum(l.weight_count + l.bias_count for l in self.layers)


def _output_shape(layer: Layer, shape: tuple[int, ...], index: int) -> tuple[int, ...]:
    if layer.kind == "dense":
        out_n, in_n = layer.weights.shape
        if shape != (in_n,):
            raise DimensionError(
                f"layer {index} (dense) expects input shape ({in_n},), got {shape}"
            )
        return (out_n,)
    if layer.kind == "conv2d":
        oc, ic, kh, kw = layer.weights.shape
        if len(shape) != 3 or shape[0] != ic:
            raise DimensionError(
                f"layer {index} (conv2d) expects ({ic}, H, W) input, got {shape}"
            )
        _, h, w = shape
        sh, sw = layer.stride
        ph, pw = layer.padding
        ho = (h + 2 * ph - kh) // sh + 1
        wo = (w + 2 * pw - kw) // sw + 1
        if ho < 1 or wo < 1:
            raise DimensionError(f"layer {index} (conv2d) kernel larger than input {shape}")
        return (oc, ho, wo)
    if layer.kind == "relu":
        return shape
    if layer.kind == "avgpool2d":
        if len(shape) != 3:
            raise DimensionError(f"layer {index} (avgpool2d) expects (C, H, W), got {shape}")
        c, h, w = shape
        ph, pw = layer.pool
        if h % ph or w % pw:
            raise DimensionError(
                f"layer {index} (avgpool2d) window {layer.pool} does not tile input {shape}"
            )
        return (c, h // ph, w // pw)
    if layer.kind == "flatten":
        return (int(np.prod(shape)),)
    raise ValueError(f"unknown layer kind {layer.kind!r}")


# ---------------------------------------------------------------------------
# Execution. Accumulations run through float64 matmul, which is exact here:
# every partial sum is an integer far below 2**53.


class ProductRecord(NamedTuple):
    layer: int
    weight_coord: tuple[int, ...]
    x: int
    v: int


class AdditionRecord(NamedTuple):
    layer: int
    bias_coord: int
    accumulator: int


@dataclass
class _DenseLog:
    operands: np.ndarray        # (in,) the activation vector
    acc_pre_bias: np.ndarray    # (out,)
    weights: np.ndarray


@dataclass
class _ConvLog:
    patches: np.ndarray         # (P, K) with K ordered (in_c, kh, kw)
    acc_pre_bias: np.ndarray    # (out_c, P)
    weights: np.ndarray         # (out_c, in_c, kh, kw)


class OperandLog:
    """Per-layer record of every multiplication operand and every pre-bias
    accumulator observed during one inference."""

    def __init__(self):
        self._layers: dict[int, _DenseLog | _ConvLog] = {}

    def layers(self) -> list[int]:
        return sorted(self._layers)

    def weight_operands(self, layer: int, coord: tuple[int, ...]) -> np.ndarray:
        """All x values multiplied with the weight at ``coord`` (one per
        spatial reuse; length 1 for dense)."""
        entry = self._layers[layer]
        if isinstance(entry, _DenseLog):
            _, i = coord
            return entry.operands[i : i + 1].astype(np.int64)
        _, ic, r, c = coord
        _, n_ic, kh, kw = entry.weights.shape
        k = (ic * kh + r) * kw + c
        return entry.patches[:, k].astype(np.int64)

    def weight_products(self, layer: int, coord: tuple[int, ...]) -> np.ndarray:
        entry = self._layers[layer]
        if isinstance(entry, _DenseLog):
            o, i = coord
            w = int(entry.weights[o, i])
        else:
            w = int(entry.weights[coord])
        return self.weight_operands(layer, coord) * w

    def bias_accumulators(self, layer: int, unit: int) -> np.ndarray:
        """Pre-bias accumulator values feeding bias ``unit`` (one per output
        position for conv2d, length 1 for dense)."""
        entry = self._layers[layer]
        if isinstance(entry, _DenseLog):
            return entry.acc_pre_bias[unit : unit + 1].astype(np.int64)
        return entry.acc_pre_bias[unit, :].astype(np.int64)

    def product_records(self) -> Iterator[ProductRecord]:
        for layer in self.layers():
            entry = self._layers[layer]
            if isinstance(entry, _DenseLog):
                out_n, in_n = entry.weights.shape
                for o in range(out_n):
                    for i in range(in_n):
                        x = int(entry.operands[i])
                        yield ProductRecord(layer, (o, i), x, x * int(entry.weights[o, i]))
            else:
                oc_n, ic_n, kh, kw = entry.weights.shape
                for oc in range(oc_n):
                    for ic in range(ic_n):
                        for r in range(kh):
                            for c in range(kw):
                                k = (ic * kh + r) * kw + c
                                w = int(entry.weights[oc, ic, r, c])
                                for x in entry.patches[:, k]:
                                    yield ProductRecord(layer, (oc, ic, r, c), int(x), int(x) * w)

    def addition_records(self) -> Iterator[AdditionRecord]:
        for layer in self.layers():
            entry = self._layers[layer]
            if isinstance(entry, _DenseLog):
                for o, acc in enumerate(entry.acc_pre_bias):
                    yield AdditionRecord(layer, o, int(acc))
            else:
                for oc in range(entry.acc_pre_bias.shape[0]):
                    for acc in entry.acc_pre_bias[oc]:
                        yield AdditionRecord(layer, oc, int(acc))


def _exact_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # Integer-valued float64 matmul; exact while |partial sums| < 2**53.
    out = np.dot(a.astype(np.float64), b.astype(np.float64))
    return np.rint(out).astype(np.int64)


def _check_int32(values: np.ndarray, context: str) -> None:
    if values.size and (values.min() < INT32_MIN or values.max() > INT32_MAX):
        raise AccumulatorOverflowError(f"{context} left the 32-bit range")


def _requantize(acc: np.ndarray, shift: int) -> np.ndarray:
    shifted = np.right_shift(acc, shift)
    return np.clip(shifted, INT8_MIN, INT8_MAX)


def _conv_output_hw(layer: Layer, hw: tuple[int, int]) -> tuple[int, int]:
    h, w = hw
    _, _, kh, kw = layer.weights.shape
    sh, sw = layer.stride
    ph, pw = layer.padding
    return ((h + 2 * ph - kh) // sh + 1, (w + 2 * pw - kw) // sw + 1)


def _im2col(xs: np.ndarray, kh: int, kw: int, stride, padding) -> np.ndarray:
    """Patch matrix (M, P, K) for a batch (M, C, H, W); K ordered (c, kh, kw),
    P ordered row-major over output positions."""
    sh, sw = stride
    ph, pw = padding
    if ph or pw:
        xs = np.pad(xs, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    windows = np.lib.stride_tricks.sliding_window_view(xs, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::sh, ::sw, :, :]          # (M, C, Ho, Wo, kh, kw)
    m, c, ho, wo = windows.shape[:4]
    patches = windows.transpose(0, 2, 3, 1, 4, 5).reshape(m, ho * wo, c * kh * kw)
    return np.ascontiguousarray(patches)


def _apply_layer_batch(
    layer: Layer, acts: np.ndarray, final: bool
) -> tuple[np.ndarray, dict | None]:
    """Apply one layer to a batch of activations; returns (outputs, detail).

    ``detail`` carries the multiplication/accumulation internals for
    parameterized layers (None otherwise).
    """
    if layer.kind == "dense":
        acc = _exact_matmul(acts, layer.weights.T.astype(np.int64))
        _check_int32(acc, "dense accumulator")
        with_bias = acc + layer.biases.astype(np.int64)
        _check_int32(with_bias, "dense accumulator plus bias")
        if final:
            out = with_bias.astype(np.int32)
        else:
            out = _requantize(with_bias, layer.requant_shift).astype(np.int8)
        return out, {"acc_pre_bias": acc}
    if layer.kind == "conv2d":
        oc, ic, kh, kw = layer.weights.shape
        patches = _im2col(acts, kh, kw, layer.stride, layer.padding)
        m, p, _ = patches.shape
        kernel = layer.weights.reshape(oc, -1).astype(np.int64)
        acc = _exact_matmul(patches.reshape(m * p, -1), kernel.T)
        acc = acc.reshape(m, p, oc).transpose(0, 2, 1)   # (M, oc, P)
        _check_int32(acc, "conv2d accumulator")
        with_bias = acc + layer.biases.astype(np.int64)[None, :, None]
        _check_int32(with_bias, "conv2d accumulator plus bias")
        if final:
            out = with_bias.astype(np.int32)
        else:
            out = _requantize(with_bias, layer.requant_shift).astype(np.int8)
        ho_wo = _conv_output_hw(layer, acts.shape[2:])
        out = out.reshape(m, oc, *ho_wo)
        return out, {"patches": patches, "acc_pre_bias": acc}
    if layer.kind == "relu":
        return np.maximum(acts, 0), None
    if layer.kind == "avgpool2d":
        ph, pw = layer.pool
        m, c, h, w = acts.shape
        blocks = acts.reshape(m, c, h // ph, ph, w // pw, pw).astype(np.int64)
        summed = blocks.sum(axis=(3, 5))
        return (summed // (ph * pw)).astype(acts.dtype), None
    if layer.kind == "flatten":
        return acts.reshape(acts.shape[0], -1), None
    raise ValueError(f"unknown layer kind {layer.kind!r}")


def _validate_batch(model: QuantizedModel, xs: np.ndarray) -> np.ndarray:
    xs = np.asarray(xs)
    if xs.shape[1:] != model.input_shape:
        raise DimensionError(
            f"input shape {xs.shape[1:]} does not match model input {model.input_shape}"
        )
    if xs.size and (xs.min() < INT8_MIN or xs.max() > INT8_MAX):
        raise ValueError(f"input values must lie in [{INT8_MIN}, {INT8_MAX}]")
    return xs.astype(np.int64)


def forward_batch(model: QuantizedModel, xs: np.ndarray) -> np.ndarray:
    """Run a batch of inferences; returns the raw outputs (int32 scores when
    the network ends with a parameterized layer)."""
    acts = _validate_batch(model, xs)
    last = len(model.layers) - 1
    for index, layer in enumerate(model.layers):
        acts, _ = _apply_layer_batch(layer, acts, final=(index == last))
    return acts


def forward(model: QuantizedModel, x: np.ndarray) -> tuple[np.ndarray, OperandLog]:
    """Run one inference, logging every multiplication operand and every
    pre-bias accumulator."""
    acts = _validate_batch(model, np.asarray(x)[None, ...])
    log = OperandLog()
    last = len(model.layers) - 1
    for index, layer in enumerate(model.layers):
        inputs = acts
        acts, detail = _apply_layer_batch(layer, acts, final=(index == last))
        if layer.kind == "dense":
            log._layers[index] = _DenseLog(
                operands=inputs[0].copy(),
                acc_pre_bias=detail["acc_pre_bias"][0].copy(),
                weights=layer.weights,
            )
        elif layer.kind == "conv2d":
            log._layers[index] = _ConvLog(
                patches=detail["patches"][0].copy(),
                acc_pre_bias=detail["acc_pre_bias"][0].copy(),
                weights=layer.weights,
            )
    return acts[0], log


# ---------------------------------------------------------------------------
# Attacker-side operand computation.


@dataclass(frozen=True)
class LayerOperands:
    """Multiplication operands of one layer for a batch of inferences.

    ``data`` is (M, in) for dense layers and (M, P, K) for conv2d, with K
    ordered (in_c, kh, kw) and P row-major over output positions; identical
    to the order forward() logs.
    """

    kind: str
    data: np.ndarray
    weight_shape: tuple[int, ...]

    @property
    def reuse_count(self) -> int:
        return 1 if self.kind == "dense" else self.data.shape[1]

    def for_weight(self, coord: tuple[int, ...]) -> np.ndarray:
        """Operand stream for one weight, inference-major."""
        if self.kind == "dense":
            _, i = coord
            return self.data[:, i].astype(np.int64)
        _, ic, r, c = coord
        _, n_ic, kh, kw = self.weight_shape
        k = (ic * kh + r) * kw + c
        return self.data[:, :, k].reshape(-1).astype(np.int64)

    def column(self, k: int) -> np.ndarray:
        """Operand stream shared by all output units for input column ``k``."""
        if self.kind == "dense":
            return self.data[:, k].astype(np.int64)
        return self.data[:, :, k].reshape(-1).astype(np.int64)

    @property
    def column_count(self) -> int:
        return self.data.shape[-1]


def activations_before_layer(
    model: QuantizedModel, layer_index: int, inputs: np.ndarray
) -> np.ndarray:
    """Activation batch entering ``layer_index`` (the network inputs when
    layer_index is 0)."""
    if not 0 <= layer_index < len(model.layers):
        raise IndexError(f"layer index {layer_index} out of range")
    acts = _validate_batch(model, inputs)
    last = len(model.layers) - 1
    for index in range(layer_index):
        acts, _ = _apply_layer_batch(model.layers[index], acts, final=(index == last))
    return acts


def neuron_inputs(
    model: QuantizedModel, layer_index: int, network_inputs: np.ndarray
) -> LayerOperands:
    """Operand values entering the multiplications of a parameterized layer,
    computed by executing the preceding layers.

    The preceding layers must carry trusted parameters: either the true ones,
    or recovered ones whose fidelity the caller accepts.
    """
    layer = model.layers[layer_index]
    if not layer.parameterized:
        raise ValueError(f"layer {layer_index} ({layer.kind}) has no weights")
    acts = activations_before_layer(model, layer_index, network_inputs)
    if layer.kind == "dense":
        return LayerOperands("dense", acts.astype(np.int8), layer.weights.shape)
    _, _, kh, kw = layer.weights.shape
    patches = _im2col(acts, kh, kw, layer.stride, layer.padding)
    return LayerOperands("conv2d", patches.astype(np.int8), layer.weights.shape)


def layer_accumulators(layer: Layer, operands: LayerOperands) -> np.ndarray:
    """Pre-bias accumulators of a layer from its operand matrix and weights.

    Returns (M, out) for dense, (M, out_c, P) for conv2d; the values
    forward() would log before the bias addition.
    """
    if layer.kind == "dense":
        acc = _exact_matmul(operands.data.astype(np.int64), layer.weights.T.astype(np.int64))
        _check_int32(acc, "dense accumulator")
        return acc
    oc = layer.weights.shape[0]
    m, p, k = operands.data.shape
    kernel = layer.weights.reshape(oc, -1).astype(np.int64)
    acc = _exact_matmul(operands.data.reshape(m * p, k), kernel.T)
    acc = acc.reshape(m, p, oc).transpose(0, 2, 1)
    _check_int32(acc, "conv2d accumulator")
    return acc


# ---------------------------------------------------------------------------
# Model generation and serialization.


@dataclass(frozen=True)
class LayerSpec:
    """Architecture of one layer, without parameter values."""

    kind: str
    shape: tuple[int, ...] | None = None
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    requant_shift: int = 0


@dataclass(frozen=True)
class Architecture:
    """Everything the attacker is assumed to know: kinds, shapes, strides,
    paddings, and requantization shifts, but no weights or biases."""

    input_shape: tuple[int, ...]
    layers: tuple[LayerSpec, ...]

    def parameterized_indices(self) -> list[int]:
        return [i for i, s in enumerate(self.layers) if s.kind in PARAMETERIZED_KINDS]


def architecture_of(model: QuantizedModel) -> Architecture:
    specs = []
    for layer in model.layers:
        if layer.kind in PARAMETERIZED_KINDS:
            specs.append(
                LayerSpec(
                    layer.kind,
                    tuple(layer.weights.shape),
                    layer.stride,
                    layer.padding,
                    layer.requant_shift,
                )
            )
        elif layer.kind == "avgpool2d":
            specs.append(LayerSpec("avgpool2d", layer.pool))
        else:
            specs.append(LayerSpec(layer.kind))
    return Architecture(model.input_shape, tuple(specs))


def build_layer(spec: LayerSpec, weights=None, biases=None) -> Layer:
    if spec.kind == "dense":
        return dense(weights, biases, spec.requant_shift)
    if spec.kind == "conv2d":
        return conv2d(weights, biases, spec.stride, spec.padding, spec.requant_shift)
    if spec.kind == "relu":
        return relu()
    if spec.kind == "avgpool2d":
        return avgpool2d(spec.shape)
    if spec.kind == "flatten":
        return flatten()
    raise ValueError(f"unknown layer kind {spec.kind!r}")


def random_model(
    input_shape: Sequence[int],
    layer_specs: Sequence[LayerSpec],
    rng: np.random.Generator,
    bias_range: tuple[int, int] = DEFAULT_BIAS_RANGE,
    metadata: dict | None = None,
) -> QuantizedModel:
    """Victim generator: weights uniform over [-127, 127], biases uniform
    over ``bias_range``. Deterministic given the generator state."""
    lo, hi = int(bias_range[0]), int(bias_range[1])
    if not INT32_MIN <= lo <= hi <= INT32_MAX:
        raise ValueError(f"invalid bias range {bias_range}")
    layers = []
    for spec in layer_specs:
        if spec.kind in PARAMETERIZED_KINDS:
            w = rng.integers(WEIGHT_MIN, WEIGHT_MAX + 1, size=spec.shape, dtype=np.int64)
            b = rng.integers(lo, hi + 1, size=spec.shape[0], dtype=np.int64)
            layers.append(build_layer(spec, w, b))
        else:
            layers.append(build_layer(spec))
    return QuantizedModel(tuple(layers), tuple(input_shape), metadata or {})


_MODEL_FORMAT_VERSION = 1


def model_to_dict(model: QuantizedModel) -> dict:
    layers = []
    for layer in model.layers:
        entry: dict = {"kind": layer.kind}
        if layer.parameterized:
            entry["shape"] = list(layer.weights.shape)
            entry["requant_shift"] = layer.requant_shift
            entry["weights"] = [int(v) for v in layer.weights.reshape(-1)]
            entry["biases"] = [int(v) for v in layer.biases]
            if layer.kind == "conv2d":
                entry["stride"] = list(layer.stride)
                entry["padding"] = list(layer.padding)
        elif layer.kind == "avgpool2d":
            entry["shape"] = list(layer.pool)
        layers.append(entry)
    return {
        "format_version": _MODEL_FORMAT_VERSION,
        "input_shape": list(model.input_shape),
        "metadata": dict(model.metadata),
        "layers": layers,
    }


_LAYER_KEYS = {
    "dense": {"kind", "shape", "requant_shift", "weights", "biases"},
    "conv2d": {"kind", "shape", "requant_shift", "weights", "biases", "stride", "padding"},
    "relu": {"kind"},
    "avgpool2d": {"kind", "shape"},
    "flatten": {"kind"},
}


def model_from_dict(doc: dict) -> QuantizedModel:
    top_keys = set(doc)
    expected = {"format_version", "input_shape", "metadata", "layers"}
    if top_keys - expected:
        raise ValueError(f"unknown model keys: {sorted(top_keys - expected)}")
    if doc.get("format_version") != _MODEL_FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {doc.get('format_version')!r}")
    layers = []
    for i, entry in enumerate(doc["layers"]):
        kind = entry.get("kind")
        if kind not in _LAYER_KEYS:
            raise ValueError(f"layer {i}: unknown kind {kind!r}")
        extra = set(entry) - _LAYER_KEYS[kind]
        if extra:
            raise ValueError(f"layer {i}: unknown keys {sorted(extra)}")
        if kind in PARAMETERIZED_KINDS:
            shape = tuple(entry["shape"])
            weights = np.array(entry["weights"], dtype=np.int64).reshape(shape)
            biases = np.array(entry["biases"], dtype=np.int64)
            spec = LayerSpec(
                kind,
                shape,
                tuple(entry.get("stride", (1, 1))),
                tuple(entry.get("padding", (0, 0))),
                int(entry.get("requant_shift", 0)),
            )
            layers.append(build_layer(spec, weights, biases))
        elif kind == "avgpool2d":
            layers.append(avgpool2d(tuple(entry["shape"])))
        else:
            layers.append(build_layer(LayerSpec(kind)))
    return QuantizedModel(tuple(layers), tuple(doc["input_shape"]), dict(doc.get("metadata", {})))


def save_model(model: QuantizedModel, path) -> None:
    text = json.dumps(model_to_dict(model), sort_keys=True, indent=1)
    Path(path).write_text(text + "\n")


def load_model(path) -> QuantizedModel:
    return model_from_dict(json.loads(Path(path).read_text()))


def models_equal(a: QuantizedModel, b: QuantizedModel) -> bool:
    """Parameter-exact equality (same architecture, same weights and biases)."""
    if a.input_shape != b.input_shape or len(a.layers) != len(b.layers):
        return False
    for la, lb in zip(a.layers, b.layers):
        if la.kind != lb.kind:
            return False
        if la.parameterized:
            if la.weights.shape != lb.weights.shape:
                return False
            if not np.array_equal(la.weights, lb.weights):
                return False
            if not np.array_equal(la.biases, lb.biases):
                return False
            if (la.requant_shift, la.stride, la.padding) != (
                lb.requant_shift,
                lb.stride,
                lb.padding,
            ):
                return False
        elif la.kind == "avgpool2d" and la.pool != lb.pool:
            return False
    return True
