"""Leakage models and simulated trace synthesis.

A processed value leaks a single scalar sample. Under the Hamming weight
model the noiseless sample is the number of 1-bits in the value's two's
complement pattern; under the stochastic model each bit position s
contributes its own coefficient, so the noiseless sample is the dot product
of the coefficient vector with the bit pattern (LSB is bit 0). Gaussian
noise with configurable variance is added on top.

Products of int8 multiplications leak over 16-bit patterns, bias-addition
sums over 32-bit patterns.

Trace files are binary, little-endian: magic ``QSCA``, u16 format version,
u8 operation kind (1 = multiplication, 2 = addition), u8 leakage width,
u32 layer index, u64 parameter coordinate, u64 trace count M, then M
records of (i32 operand, f64 sample). An archive is a directory of trace
files plus ``manifest.json`` and the attacker-chosen network inputs.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from . import qnn
from .errors import AccumulatorOverflowError, ArchiveError, DimensionError, RangeError
from .rng import derive_rng

HAMMING_WEIGHT = "hamming_weight"
STOCHASTIC = "stochastic"

MULTIPLICATION = "multiplication"
ADDITION = "addition"
_OP_CODES = {MULTIPLICATION: 1, ADDITION: 2}
_OP_NAMES = {v: k for k, v in _OP_CODES.items()}

PRODUCT_WIDTH = 16
SUM_WIDTH = 32

TRACE_MAGIC = b"QSCA"
TRACE_FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHBBIQQ")
_RECORD_DTYPE = np.dtype([("operand", "<i4"), ("sample", "<f8")])


@dataclass(frozen=True)
class LeakageModelSpec:
    """Leakage model: kind, target bit width, noise variance, and (for the
    stochastic kind) one coefficient per bit."""

    kind: str
    width: int
    noise_variance: float = 0.0
    coefficients: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.kind not in (HAMMING_WEIGHT, STOCHASTIC):
            raise ValueError(f"unknown leakage model kind {self.kind!r}")
        if not 1 <= self.width <= 64:
            raise ValueError(f"width must be in [1, 64], got {self.width}")
        if self.noise_variance < 0:
            raise ValueError(f"noise variance must be non-negative, got {self.noise_variance}")
        if self.kind == STOCHASTIC:
            if self.coefficients is None or len(self.coefficients) != self.width:
                n = None if self.coefficients is None else len(self.coefficients)
                raise ValueError(
                    f"stochastic model at width {self.width} needs {self.width} "
                    f"coefficients, got {n}"
                )
            object.__setattr__(self, "coefficients", tuple(float(c) for c in self.coefficients))
        elif self.coefficients is not None:
            raise ValueError("hamming_weight model takes no coefficients")

    def noiseless(self) -> "LeakageModelSpec":
        return LeakageModelSpec(self.kind, self.width, 0.0, self.coefficients)


def hamming_weight_model(width: int, noise_variance: float = 0.0) -> LeakageModelSpec:
    return LeakageModelSpec(HAMMING_WEIGHT, width, noise_variance)


def stochastic_model(coefficients, noise_variance: float = 0.0) -> LeakageModelSpec:
    coefficients = tuple(float(c) for c in coefficients)
    return LeakageModelSpec(STOCHASTIC, len(coefficients), noise_variance, coefficients)


def sample_coefficients(
    width: int, mean: float, variance: float, rng: np.random.Generator
) -> np.ndarray:
    """Draw one coefficient per bit from N(mean, variance)."""
    if width < 1:
        raise ValueError(f"width must be at least 1, got {width}")
    if variance < 0:
        raise ValueError(f"variance must be non-negative, got {variance}")
    return rng.normal(mean, np.sqrt(variance), size=width)


_POPCOUNT8 = np.array([bin(i).count("1") for i in range(256)], dtype=np.float64)


def byte_tables(spec: LeakageModelSpec) -> np.ndarray:
    """Per-byte lookup tables such that the noiseless model value of a
    pattern is the sum over its bytes of ``tables[k][byte_k]``."""
    n_bytes = (spec.width + 7) // 8
    if spec.kind == HAMMING_WEIGHT:
        return np.tile(_POPCOUNT8, (n_bytes, 1))
    tables = np.zeros((n_bytes, 256), dtype=np.float64)
    bytes_of = np.arange(256)
    for k in range(n_bytes):
        for s in range(8):
            bit = 8 * k + s
            if bit >= spec.width:
                break
            tables[k] += spec.coefficients[bit] * ((bytes_of >> s) & 1)
    return tables


def _check_width_range(values: np.ndarray, width: int) -> None:
    lo, hi = -(1 << (width - 1)), (1 << (width - 1)) - 1
    if values.size and (values.min() < lo or values.max() > hi):
        bad = values[(values < lo) | (values > hi)][0]
        raise RangeError(
            f"value {bad} is not representable in {width}-bit two's complement"
        )


def noiseless_leakage(values, spec: LeakageModelSpec) -> np.ndarray:
    """Noiseless model values of an integer array; values must fit the
    spec's width."""
    arr = np.asarray(values, dtype=np.int64)
    _check_width_range(arr, spec.width)
    patterns = arr & ((1 << spec.width) - 1)
    tables = byte_tables(spec)
    out = tables[0][patterns & 0xFF]
    for k in range(1, tables.shape[0]):
        out += tables[k][(patterns >> (8 * k)) & 0xFF]
    return out


def leak(value: int, spec: LeakageModelSpec, rng: np.random.Generator | None = None) -> float:
    """One leakage sample of one value: noiseless model value plus Gaussian
    noise (no randomness is consumed when the noise variance is 0)."""
    base = float(noiseless_leakage(np.array([value]), spec)[0])
    if spec.noise_variance > 0:
        if rng is None:
            raise ValueError("a random generator is required when noise variance > 0")
        base += rng.normal(0.0, np.sqrt(spec.noise_variance))
    return base


def leak_many(values, spec: LeakageModelSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    samples = noiseless_leakage(values, spec)
    if spec.noise_variance > 0:
        if rng is None:
            raise ValueError("a random generator is required when noise variance > 0")
        samples = samples + rng.normal(0.0, np.sqrt(spec.noise_variance), size=samples.shape)
    return samples


@dataclass(frozen=True)
class TraceSet:
    """Leakage samples for one target parameter.

    For multiplication targets the operands are the known neuron inputs; for
    addition targets they are the pre-bias accumulators. Samples align with
    operands index by index.
    """

    layer_index: int
    coordinate: int
    operation: str
    width: int
    operands: np.ndarray
    samples: np.ndarray

    def __post_init__(self):
        if self.operation not in _OP_CODES:
            raise ValueError(f"unknown operation {self.operation!r}")
        operands = np.asarray(self.operands, dtype=np.int64)
        samples = np.asarray(self.samples, dtype=np.float64)
        if operands.ndim != 1 or samples.ndim != 1 or len(operands) != len(samples):
            raise DimensionError("operands and samples must be 1-D and equal length")
        if len(operands) < 1:
            raise DimensionError("a trace set needs at least one trace")
        object.__setattr__(self, "operands", operands)
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return len(self.operands)


def simulate_weight_traces(
    weight: int,
    inputs,
    spec: LeakageModelSpec,
    rng: np.random.Generator | None = None,
    layer_index: int = 0,
    coordinate: int = 0,
) -> TraceSet:
    """Simulate leakage of the products input * weight."""
    if spec.width < PRODUCT_WIDTH:
        raise ValueError(f"product leakage needs width >= {PRODUCT_WIDTH}, got {spec.width}")
    operands = np.asarray(inputs, dtype=np.int64)
    if operands.size < 1:
        raise DimensionError("need at least one input")
    products = operands * int(weight)
    samples = leak_many(products, spec, rng)
    return TraceSet(layer_index, coordinate, MULTIPLICATION, spec.width, operands, samples)


def simulate_bias_traces(
    bias: int,
    accumulators,
    spec: LeakageModelSpec,
    rng: np.random.Generator | None = None,
    layer_index: int = 0,
    coordinate: int = 0,
) -> TraceSet:
    """Simulate leakage of the sums accumulator + bias."""
    if spec.width != SUM_WIDTH:
        raise ValueError(f"bias leakage is defined at width {SUM_WIDTH}, got {spec.width}")
    operands = np.asarray(accumulators, dtype=np.int64)
    if operands.size < 1:
        raise DimensionError("need at least one accumulator")
    sums = operands + int(bias)
    lo, hi = -(1 << 31), (1 << 31) - 1
    if sums.min() < lo or sums.max() > hi:
        raise AccumulatorOverflowError("bias addition left the 32-bit range")
    samples = leak_many(sums, spec, rng)
    return TraceSet(layer_index, coordinate, ADDITION, spec.width, operands, samples)


# ---------------------------------------------------------------------------
# Trace file format.


def write_trace_file(trace_set: TraceSet, path) -> None:
    header = _HEADER.pack(
        TRACE_MAGIC,
        TRACE_FORMAT_VERSION,
        _OP_CODES[trace_set.operation],
        trace_set.width,
        trace_set.layer_index,
        trace_set.coordinate,
        len(trace_set),
    )
    records = np.empty(len(trace_set), dtype=_RECORD_DTYPE)
    records["operand"] = trace_set.operands.astype(np.int32)
    records["sample"] = trace_set.samples
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(records.tobytes())


def read_trace_file(path) -> TraceSet:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ArchiveError(f"{path}: truncated trace file")
    magic, version, op_code, width, layer, coordinate, count = _HEADER.unpack_from(raw)
    if magic != TRACE_MAGIC:
        raise ArchiveError(f"{path}: bad magic {magic!r}")
    if version != TRACE_FORMAT_VERSION:
        raise ArchiveError(f"{path}: unsupported trace format version {version}")
    if op_code not in _OP_NAMES:
        raise ArchiveError(f"{path}: unknown operation code {op_code}")
    body = raw[_HEADER.size :]
    if len(body) != count * _RECORD_DTYPE.itemsize:
        raise ArchiveError(f"{path}: expected {count} records, file is inconsistent")
    records = np.frombuffer(body, dtype=_RECORD_DTYPE)
    return TraceSet(
        layer,
        coordinate,
        _OP_NAMES[op_code],
        width,
        records["operand"].astype(np.int64),
        records["sample"].astype(np.float64),
    )


# ---------------------------------------------------------------------------
# Network-wide trace archives.


class TargetRef(NamedTuple):
    layer: int
    operation: str
    coordinate: int
    traces: int


@dataclass(frozen=True)
class NetworkLeakageSpec:
    """Leakage configuration of a whole network simulation: one model for
    multiplication products (width 16), one for bias-addition sums
    (width 32)."""

    product_model: LeakageModelSpec
    sum_model: LeakageModelSpec

    def __post_init__(self):
        if self.product_model.width != PRODUCT_WIDTH:
            raise ValueError(f"product model width must be {PRODUCT_WIDTH}")
        if self.sum_model.width != SUM_WIDTH:
            raise ValueError(f"sum model width must be {SUM_WIDTH}")


class SimulatedTraceArchive:
    """Lazy archive: every target's trace set is generated on demand from
    the victim model, the attacker inputs, and per-target noise streams
    derived from the master seed. Generating a target twice, in any order,
    yields identical traces."""

    def __init__(
        self,
        model: qnn.QuantizedModel,
        inputs: np.ndarray,
        spec: NetworkLeakageSpec,
        master_seed: int,
    ):
        inputs = np.asarray(inputs)
        if inputs.ndim < 2 or inputs.shape[1:] != model.input_shape:
            raise DimensionError(
                f"inputs shaped {inputs.shape} do not match model input {model.input_shape}"
            )
        self.model = model
        self.network_inputs = inputs.astype(np.int8)
        self.spec = spec
        self.master_seed = int(master_seed)
        self._operands: dict[int, qnn.LayerOperands] = {}
        self._accumulators: dict[int, np.ndarray] = {}

    @property
    def product_model(self) -> LeakageModelSpec:
        return self.spec.product_model

    @property
    def sum_model(self) -> LeakageModelSpec:
        return self.spec.sum_model

    def _layer_operands(self, layer: int) -> qnn.LayerOperands:
        if layer not in self._operands:
            self._operands[layer] = qnn.neuron_inputs(self.model, layer, self.network_inputs)
        return self._operands[layer]

    def _layer_accumulators(self, layer: int) -> np.ndarray:
        if layer not in self._accumulators:
            acc = qnn.layer_accumulators(self.model.layers[layer], self._layer_operands(layer))
            self._accumulators[layer] = acc
        return self._accumulators[layer]

    def targets(self) -> list[TargetRef]:
        refs = []
        m = len(self.network_inputs)
        for layer_idx in self.model.parameterized_indices():
            layer = self.model.layers[layer_idx]
            reuse = self._layer_operands(layer_idx).reuse_count
            for coord in range(layer.weight_count):
                refs.append(TargetRef(layer_idx, MULTIPLICATION, coord, m * reuse))
            for unit in range(layer.bias_count):
                refs.append(TargetRef(layer_idx, ADDITION, unit, m * reuse))
        return refs

    def get(self, layer: int, operation: str, coordinate: int) -> TraceSet:
        model_layer = self.model.layers[layer]
        if not model_layer.parameterized:
            raise ArchiveError(f"layer {layer} has no parameters")
        rng = derive_rng(self.master_seed, "trace", layer, _OP_CODES[operation], coordinate)
        if operation == MULTIPLICATION:
            coord = tuple(int(c) for c in np.unravel_index(coordinate, model_layer.weights.shape))
            stream = self._layer_operands(layer).for_weight(coord)
            true_w = int(model_layer.weights[coord])
            return simulate_weight_traces(
                true_w, stream, self.product_model, rng, layer, coordinate
            )
        if operation == ADDITION:
            acc = self._layer_accumulators(layer)
            if coordinate >= model_layer.bias_count:
                raise ArchiveError(f"layer {layer} has no bias {coordinate}")
            stream = acc[:, coordinate].reshape(-1) if acc.ndim == 2 else acc[:, coordinate, :].reshape(-1)
            true_b = int(model_layer.biases[coordinate])
            return simulate_bias_traces(true_b, stream, self.sum_model, rng, layer, coordinate)
        raise ArchiveError(f"unknown operation {operation!r}")

    def materialize(self, directory) -> None:
        """Write every target to disk in the binary archive layout."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        entries = []
        for ref in self.targets():
            name = f"layer{ref.layer:03d}_{'mul' if ref.operation == MULTIPLICATION else 'add'}_{ref.coordinate:06d}.trace"
            write_trace_file(self.get(ref.layer, ref.operation, ref.coordinate), directory / name)
            entries.append(
                {
                    "file": name,
                    "layer": ref.layer,
                    "kind": ref.operation,
                    "coordinate": ref.coordinate,
                    "traces": ref.traces,
                }
            )
        np.save(directory / "inputs.npy", self.network_inputs)
        manifest = {
            "format_version": TRACE_FORMAT_VERSION,
            "master_seed": self.master_seed,
            "input_count": len(self.network_inputs),
            "inputs_file": "inputs.npy",
            "product_model": _model_spec_to_dict(self.product_model),
            "sum_model": _model_spec_to_dict(self.sum_model),
            "targets": entries,
        }
        (directory / "manifest.json").write_text(
            json.dumps(manifest, sort_keys=True, indent=1) + "\n"
        )


def simulate_network_traces(
    model: qnn.QuantizedModel,
    inputs: np.ndarray,
    spec: NetworkLeakageSpec,
    master_seed: int,
) -> SimulatedTraceArchive:
    """One trace set per weight (products over every spatial reuse of every
    input) and one per bias (pre-bias accumulators), all derived from a
    single conceptual forward pass per input."""
    return SimulatedTraceArchive(model, inputs, spec, master_seed)


def _model_spec_to_dict(spec: LeakageModelSpec) -> dict:
    doc = {"kind": spec.kind, "width": spec.width, "noise_variance": spec.noise_variance}
    if spec.coefficients is not None:
        doc["coefficients"] = list(spec.coefficients)
    return doc


def _model_spec_from_dict(doc: dict) -> LeakageModelSpec:
    return LeakageModelSpec(
        doc["kind"], doc["width"], doc["noise_variance"],
        tuple(doc["coefficients"]) if "coefficients" in doc else None,
    )


class DirectoryTraceArchive:
    """Archive backed by a directory written by
    :meth:`SimulatedTraceArchive.materialize`."""

    def __init__(self, directory):
        self.directory = Path(directory)
        manifest_path = self.directory / "manifest.json"
        if not manifest_path.exists():
            raise ArchiveError(f"{self.directory}: missing manifest.json")
        manifest = json.loads(manifest_path.read_text())
        if manifest.get("format_version") != TRACE_FORMAT_VERSION:
            raise ArchiveError(f"unsupported archive format version")
        self.master_seed = int(manifest["master_seed"])
        self.product_model = _model_spec_from_dict(manifest["product_model"])
        self.sum_model = _model_spec_from_dict(manifest["sum_model"])
        self._index: dict[tuple[int, str, int], dict] = {}
        for entry in manifest["targets"]:
            self._index[(entry["layer"], entry["kind"], entry["coordinate"])] = entry
        self.network_inputs = np.load(self.directory / manifest["inputs_file"])

    def targets(self) -> list[TargetRef]:
        return [
            TargetRef(e["layer"], e["kind"], e["coordinate"], e["traces"])
            for e in self._index.values()
        ]

    def get(self, layer: int, operation: str, coordinate: int) -> TraceSet:
        key = (layer, operation, coordinate)
        if key not in self._index:
            raise ArchiveError(
                f"archive has no {operation} target for layer {layer}, coordinate {coordinate}"
            )
        return read_trace_file(self.directory / self._index[key]["file"])

    def missing_targets(self, required: Iterable[tuple[int, str, int]]) -> list[tuple[int, str, int]]:
        return [key for key in required if key not in self._index]
