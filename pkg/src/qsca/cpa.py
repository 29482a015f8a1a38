"""Correlation-based parameter recovery.

For one secret parameter, the engine ranks every candidate value by the
absolute Pearson correlation between the observed leakage samples and the
noiseless hypothetical leakage of the candidate's intermediate values
(candidate * operand for weights, candidate + operand for biases). The
candidate maximizing |r| wins; candidates tied within an absolute tolerance
of 1e-12 are separated by the smallest |sum(hypothetical - observed)|.

Correlations are computed from single-pass sufficient statistics. Because
operands repeat heavily (int8 activations take at most 256 values), the
statistics are accumulated per distinct operand value, which collapses the
per-candidate cost from O(M) to O(distinct values). For very large bias
hypothesis spaces the per-candidate sums over distinct values are themselves
a cross-correlation of a value histogram with a leakage table, evaluated via
FFT. All strategies compute the same sufficient statistics; strategy choice
depends only on problem shape, never on data values, so results are
reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import signal

from . import leakage, qnn
from .errors import ArchiveError, DimensionError, RangeError
from .leakage import (
    ADDITION,
    MULTIPLICATION,
    LeakageModelSpec,
    TraceSet,
    byte_tables,
    noiseless_leakage,
)

TIE_TOLERANCE = 1e-12

# Strategy thresholds: switch to the FFT path when the dense candidate/value
# product grid would exceed _FFT_PAIR_THRESHOLD entries and the histogram
# stays addressable.
_FFT_PAIR_THRESHOLD = 1 << 22
_FFT_MAX_TABLE = 1 << 23
_EXACT_BLOCK = 1 << 22

INT8_DOMAIN = np.arange(-128, 128, dtype=np.int64)


@dataclass(frozen=True)
class HypothesisSpace:
    """Ordered, duplicate-free candidate values plus the bit width of the
    hypothetical leakage target."""

    values: np.ndarray
    width: int

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.int64)
        if values.ndim != 1 or values.size == 0:
            raise ValueError("hypothesis space must be a non-empty 1-D list")
        if len(np.unique(values)) != len(values):
            raise ValueError("hypothesis space contains duplicates")
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return len(self.values)

    def index_of(self, value: int) -> int:
        hits = np.nonzero(self.values == value)[0]
        if len(hits) != 1:
            raise ValueError(f"value {value} is not in the hypothesis space")
        return int(hits[0])


def weight_space(include_minus_128: bool = False) -> HypothesisSpace:
    """Default 8-bit weight space -127..127; optionally widened to -128."""
    lo = -128 if include_minus_128 else -127
    return HypothesisSpace(np.arange(lo, 128), leakage.PRODUCT_WIDTH)


def bias_space(low: int = -32768, high: int = 32767) -> HypothesisSpace:
    if low > high:
        raise ValueError(f"empty bias range [{low}, {high}]")
    return HypothesisSpace(np.arange(low, high + 1), leakage.SUM_WIDTH)


@dataclass(frozen=True)
class CpaResult:
    """Outcome of one candidate enumeration."""

    correlations: np.ndarray
    guessed_value: int
    tie_break_used: bool
    rank_of_true: int | None = None

    @property
    def best_abs_correlation(self) -> float:
        return float(np.max(np.abs(self.correlations)))


# ---------------------------------------------------------------------------
# Pearson correlation via sufficient statistics.


class CorrelationAccumulator:
    """Single-pass Pearson correlation over chunked (hypothetical, observed)
    pairs. Sums are anchored at the first observed pair to avoid
    cancellation for large-mean inputs."""

    def __init__(self):
        self.n = 0
        self._anchor_h = 0.0
        self._anchor_l = 0.0
        self._sh = 0.0
        self._sl = 0.0
        self._shh = 0.0
        self._sll = 0.0
        self._shl = 0.0

    def update(self, hypothetical, observed) -> None:
        h = np.asarray(hypothetical, dtype=np.float64)
        l = np.asarray(observed, dtype=np.float64)
        if h.shape != l.shape or h.ndim != 1:
            raise DimensionError("hypothetical and observed chunks must be equal-length 1-D")
        if h.size == 0:
            return
        if self.n == 0:
            self._anchor_h = float(h[0])
            self._anchor_l = float(l[0])
        hc = h - self._anchor_h
        lc = l - self._anchor_l
        self.n += len(h)
        self._sh += hc.sum()
        self._sl += lc.sum()
        self._shh += np.dot(hc, hc)
        self._sll += np.dot(lc, lc)
        self._shl += np.dot(hc, lc)

    def correlation(self) -> float:
        if self.n < 2:
            raise ValueError("correlation needs at least 2 samples")
        var_h = self._shh - self._sh * self._sh / self.n
        var_l = self._sll - self._sl * self._sl / self.n
        if var_h <= 0 or var_l <= 0:
            return 0.0
        cov = self._shl - self._sh * self._sl / self.n
        return float(np.clip(cov / np.sqrt(var_h * var_l), -1.0, 1.0))


def pearson(hypothetical, observed) -> float:
    """Pearson correlation coefficient; 0.0 when either side has zero
    variance."""
    h = np.asarray(hypothetical, dtype=np.float64)
    l = np.asarray(observed, dtype=np.float64)
    if h.ndim != 1 or l.ndim != 1 or h.shape != l.shape:
        raise DimensionError(f"length mismatch: {h.shape} vs {l.shape}")
    if h.size < 2:
        raise ValueError("correlation needs at least 2 samples")
    acc = CorrelationAccumulator()
    acc.update(h, l)
    return acc.correlation()


def hypothetical_leakage(
    candidate: int,
    operands,
    attack_model: LeakageModelSpec,
    operation: str = MULTIPLICATION,
) -> np.ndarray:
    """Noiseless model values of the candidate's intermediates."""
    if attack_model.noise_variance != 0:
        raise ValueError("attack models are noiseless; use spec.noiseless()")
    operands = np.asarray(operands, dtype=np.int64)
    if operation == MULTIPLICATION:
        targets = operands * int(candidate)
    elif operation == ADDITION:
        targets = operands + int(candidate)
    else:
        raise ValueError(f"unknown operation {operation!r}")
    return noiseless_leakage(targets, attack_model)


# ---------------------------------------------------------------------------
# Grouped sufficient statistics.


def _group_operands(operands: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Collapse an operand stream to (distinct values, counts, bucket index).

    Small integer spans use a direct offset histogram; anything else falls
    back to np.unique.
    """
    lo = int(operands.min())
    hi = int(operands.max())
    span = hi - lo + 1
    if span <= 1 << 16:
        idx = (operands - lo).astype(np.int64)
        counts = np.bincount(idx, minlength=span).astype(np.float64)
        present = np.nonzero(counts)[0]
        remap = np.full(span, -1, dtype=np.int64)
        remap[present] = np.arange(len(present))
        return present + lo, counts[present], remap[idx]
    values, idx, counts = np.unique(operands, return_inverse=True, return_counts=True)
    return values, counts.astype(np.float64), idx.reshape(-1)


def _candidate_targets(
    candidates: np.ndarray, values: np.ndarray, operation: str
) -> np.ndarray:
    if operation == MULTIPLICATION:
        return candidates[:, None] * values[None, :]
    return candidates[:, None] + values[None, :]


@dataclass
class _Stats:
    """Per-candidate sufficient statistics against one trace set."""

    sh: np.ndarray       # sum_j H_ij
    var_h_sum: np.ndarray  # sum_j (H_ij - mean_i)^2, scaled by M
    cov_sum: np.ndarray  # sum_j (H_ij)(l_j - mean(l))
    constant_h: np.ndarray  # exact constancy mask where known, else None-like


def _stats_exact(
    candidates: np.ndarray,
    values: np.ndarray,
    counts: np.ndarray,
    lsum_centered: np.ndarray,
    model: LeakageModelSpec,
    operation: str,
    m: int,
) -> _Stats:
    n = len(candidates)
    u = len(values)
    sh = np.empty(n)
    sh2 = np.empty(n)
    cov = np.empty(n)
    const = np.empty(n, dtype=bool)
    block = max(1, _EXACT_BLOCK // max(u, 1))
    for start in range(0, n, block):
        cand = candidates[start : start + block]
        targets = _candidate_targets(cand, values, operation)
        table = noiseless_leakage(targets.reshape(-1), model).reshape(targets.shape)
        stop = start + len(cand)
        sh[start:stop] = np.einsum("cu,u->c", table, counts, optimize=False)
        sh2[start:stop] = np.einsum("cu,cu,u->c", table, table, counts, optimize=False)
        cov[start:stop] = np.einsum("cu,u->c", table, lsum_centered, optimize=False)
        const[start:stop] = table.max(axis=1) == table.min(axis=1)
    var_h = np.maximum(sh2 - sh * sh / m, 0.0)
    return _Stats(sh, var_h, cov, const)


def _stats_fft(
    candidates: np.ndarray,
    values: np.ndarray,
    counts: np.ndarray,
    lsum_centered: np.ndarray,
    model: LeakageModelSpec,
    m: int,
) -> _Stats:
    """Addition-target statistics for a contiguous family of shifts.

    Histogram the accumulators over their integer span, tabulate the model
    over the span of all possible sums, and read off every candidate's sums
    as one cross-correlation per statistic.
    """
    v_lo, v_hi = int(values[0]), int(values[-1])
    b_lo, b_hi = int(candidates.min()), int(candidates.max())
    count_hist = np.zeros(v_hi - v_lo + 1)
    count_hist[values - v_lo] = counts
    lsum_hist = np.zeros_like(count_hist)
    lsum_hist[values - v_lo] = lsum_centered
    table_domain = np.arange(v_lo + b_lo, v_hi + b_hi + 1, dtype=np.int64)
    table = noiseless_leakage(table_domain, model)
    sh_all = signal.correlate(table, count_hist, mode="valid", method="fft")
    sh2_all = signal.correlate(table * table, count_hist, mode="valid", method="fft")
    cov_all = signal.correlate(table, lsum_hist, mode="valid", method="fft")
    pick = candidates - b_lo
    sh = sh_all[pick]
    var_h = np.maximum(sh2_all[pick] - sh * sh / m, 0.0)
    # FFT roundoff can leave a hair of spurious variance on constant rows;
    # treat variance below measurement noise floor as constant.
    const = var_h <= 1e-6
    return _Stats(sh, var_h, cov_all[pick], const)


def _attack(
    operands: np.ndarray,
    samples: np.ndarray,
    space: HypothesisSpace,
    attack_model: LeakageModelSpec,
    operation: str,
    true_value: int | None,
) -> CpaResult:
    m = len(operands)
    if m < 2:
        raise ValueError("an attack needs at least 2 traces")
    if attack_model.width != space.width:
        raise DimensionError(
            f"attack model width {attack_model.width} != space width {space.width}"
        )
    model = attack_model.noiseless()
    values, counts, idx = _group_operands(operands)
    l_mean = samples.mean()
    centered = samples - l_mean
    lsum_centered = np.bincount(idx, weights=centered, minlength=len(values))
    var_l_sum = float(np.dot(centered, centered))
    l_constant = samples.min() == samples.max()

    use_fft = (
        operation == ADDITION
        and len(space) * len(values) > _FFT_PAIR_THRESHOLD
        and (int(values[-1]) - int(values[0])) + (int(space.values.max()) - int(space.values.min())) + 1
        <= _FFT_MAX_TABLE
    )
    if use_fft:
        stats = _stats_fft(space.values, values, counts, lsum_centered, model, m)
    else:
        stats = _stats_exact(space.values, values, counts, lsum_centered, model, operation, m)

    if l_constant or var_l_sum <= 0:
        correlations = np.zeros(len(space))
    else:
        denom = np.sqrt(stats.var_h_sum * var_l_sum)
        with np.errstate(divide="ignore", invalid="ignore"):
            correlations = np.where(denom > 0, stats.cov_sum / denom, 0.0)
        correlations[stats.constant_h] = 0.0
        correlations = np.clip(correlations, -1.0, 1.0)

    abs_r = np.abs(correlations)
    best = abs_r.max()
    tied = np.nonzero(abs_r >= best - TIE_TOLERANCE)[0]
    if len(tied) == 1:
        pick = tied[0]
        tie_break_used = False
    else:
        # argmin |sum_j (H_ij - l_j)| over the tied candidates.
        deviations = np.abs(stats.sh[tied] - float(samples.sum()))
        pick = tied[int(np.argmin(deviations))]
        tie_break_used = True

    rank = None
    if true_value is not None:
        true_idx = space.index_of(true_value)
        rank = int(np.sum(abs_r > abs_r[true_idx])) + 1
    return CpaResult(correlations, int(space.values[pick]), tie_break_used, rank)


def recover_weight(
    traces: TraceSet,
    space: HypothesisSpace,
    attack_model: LeakageModelSpec,
    true_value: int | None = None,
) -> CpaResult:
    """Recover one weight from multiplication traces."""
    if traces.operation != MULTIPLICATION:
        raise ValueError(f"expected multiplication traces, got {traces.operation}")
    return _attack(traces.operands, traces.samples, space, attack_model, MULTIPLICATION, true_value)


def recover_bias(
    traces: TraceSet,
    space: HypothesisSpace,
    attack_model: LeakageModelSpec,
    true_value: int | None = None,
) -> CpaResult:
    """Recover one bias from addition traces; the supplied accumulators are
    trusted (weights recovered first)."""
    if traces.operation != ADDITION:
        raise ValueError(f"expected addition traces, got {traces.operation}")
    return _attack(traces.operands, traces.samples, space, attack_model, ADDITION, true_value)


# ---------------------------------------------------------------------------
# Layer and network recovery.


@dataclass(frozen=True)
class AttackConfig:
    """Attacker knowledge: candidate spaces and the (noiseless) leakage
    models assumed for products and sums."""

    weight_space: HypothesisSpace
    bias_space: HypothesisSpace
    product_model: LeakageModelSpec
    sum_model: LeakageModelSpec

    def __post_init__(self):
        if self.product_model.noise_variance != 0 or self.sum_model.noise_variance != 0:
            raise ValueError("attack models must be noiseless")
        if self.product_model.width != self.weight_space.width:
            raise DimensionError("product model width must match the weight space")
        if self.sum_model.width != self.bias_space.width:
            raise DimensionError("sum model width must match the bias space")


def hamming_weight_attack(
    w_space: HypothesisSpace | None = None, b_space: HypothesisSpace | None = None
) -> AttackConfig:
    w_space = w_space or weight_space()
    b_space = b_space or bias_space()
    return AttackConfig(
        w_space,
        b_space,
        leakage.hamming_weight_model(w_space.width),
        leakage.hamming_weight_model(b_space.width),
    )


def profiled_attack(
    product_coefficients,
    sum_coefficients,
    w_space: HypothesisSpace | None = None,
    b_space: HypothesisSpace | None = None,
) -> AttackConfig:
    """Attacker who profiled the device and knows the simulation's exact bit
    coefficients."""
    return AttackConfig(
        w_space or weight_space(),
        b_space or bias_space(),
        leakage.stochastic_model(product_coefficients),
        leakage.stochastic_model(sum_coefficients),
    )


@dataclass
class LayerRecovery:
    layer_index: int
    weights: np.ndarray
    biases: np.ndarray
    weight_results: list[CpaResult]
    bias_results: list[CpaResult]


def _require_targets(archive, layer_index: int, layer_spec: qnn.LayerSpec) -> None:
    n_weights = int(np.prod(layer_spec.shape))
    n_biases = layer_spec.shape[0]
    required = [(layer_index, MULTIPLICATION, c) for c in range(n_weights)]
    required += [(layer_index, ADDITION, u) for u in range(n_biases)]
    have = {(t.layer, t.operation, t.coordinate) for t in archive.targets()}
    missing = [key for key in required if key not in have]
    if missing:
        raise ArchiveError(
            f"archive is missing {len(missing)} targets for layer {layer_index}: "
            f"{missing[:5]}{'...' if len(missing) > 5 else ''}"
        )


def recover_layer(
    architecture: qnn.Architecture,
    layer_index: int,
    archive,
    config: AttackConfig,
    recovered_layers: Sequence[qnn.Layer],
) -> LayerRecovery:
    """Recover all weights, then all biases, of one parameterized layer.

    Multiplication operands come from executing the recovered prefix on the
    archived network inputs; bias-stage accumulators come from the weights
    recovered moments earlier, so errors propagate exactly as they would for
    a real attacker.
    """
    spec = architecture.layers[layer_index]
    if spec.kind not in qnn.PARAMETERIZED_KINDS:
        raise ValueError(f"layer {layer_index} ({spec.kind}) has no parameters")
    if len(recovered_layers) != layer_index:
        raise ValueError(
            f"need exactly the {layer_index} preceding layers, got {len(recovered_layers)}"
        )
    _require_targets(archive, layer_index, spec)

    probe_model = _architecture_model(architecture, list(recovered_layers))
    operands = qnn.neuron_inputs(probe_model, layer_index, archive.network_inputs)

    # All weights sharing an input column share that column's operand
    # stream, so the hypothesis table and per-column histograms are reused.
    w_space = config.weight_space
    targets = _candidate_targets(w_space.values, INT8_DOMAIN, MULTIPLICATION)
    table = noiseless_leakage(targets.reshape(-1), config.product_model).reshape(targets.shape)
    const_rows = table.max(axis=1) == table.min(axis=1)

    column_counts: dict[int, np.ndarray] = {}
    column_codes: dict[int, np.ndarray] = {}

    n_weights = int(np.prod(spec.shape))
    weight_results: list[CpaResult] = []
    guessed_w = np.empty(n_weights, dtype=np.int64)
    for flat in range(n_weights):
        coord = tuple(int(c) for c in np.unravel_index(flat, spec.shape))
        k = _input_column(spec, coord)
        if k not in column_counts:
            codes = (operands.column(k) + 128).astype(np.int64)
            column_codes[k] = codes
            column_counts[k] = np.bincount(codes, minlength=256).astype(np.float64)
        samples = archive.get(layer_index, MULTIPLICATION, flat).samples
        result = _attack_with_table(
            table,
            const_rows,
            w_space,
            column_codes[k],
            column_counts[k],
            samples,
        )
        weight_results.append(result)
        guessed_w[flat] = result.guessed_value

    recovered_weights = guessed_w.reshape(spec.shape)
    recovered_layer = qnn.build_layer(
        spec, recovered_weights, np.zeros(spec.shape[0], dtype=np.int64)
    )
    accumulators = qnn.layer_accumulators(recovered_layer, operands)

    bias_results: list[CpaResult] = []
    n_biases = spec.shape[0]
    guessed_b = np.empty(n_biases, dtype=np.int64)
    for unit in range(n_biases):
        stream = (
            accumulators[:, unit]
            if accumulators.ndim == 2
            else accumulators[:, unit, :].reshape(-1)
        )
        samples = archive.get(layer_index, ADDITION, unit).samples
        result = _attack(
            stream, samples, config.bias_space, config.sum_model, ADDITION, None
        )
        bias_results.append(result)
        guessed_b[unit] = result.guessed_value

    return LayerRecovery(
        layer_index, recovered_weights, guessed_b, weight_results, bias_results
    )


def _input_column(spec: qnn.LayerSpec, coord: tuple[int, ...]) -> int:
    if spec.kind == "dense":
        return coord[1]
    _, _, kh, kw = spec.shape
    _, ic, r, c = coord
    return (ic * kh + r) * kw + c


def _attack_with_table(
    table: np.ndarray,
    const_rows: np.ndarray,
    space: HypothesisSpace,
    codes: np.ndarray,
    counts: np.ndarray,
    samples: np.ndarray,
) -> CpaResult:
    """The exact grouped attack with a precomputed full-int8-domain
    hypothesis table; numerically identical to the generic path."""
    m = len(samples)
    l_mean = samples.mean()
    centered = samples - l_mean
    lsum_centered = np.bincount(codes, weights=centered, minlength=256)
    var_l_sum = float(np.dot(centered, centered))
    sh = np.einsum("cu,u->c", table, counts, optimize=False)
    if samples.min() == samples.max() or var_l_sum <= 0:
        correlations = np.zeros(len(space))
    else:
        sh2 = np.einsum("cu,cu,u->c", table, table, counts, optimize=False)
        cov = np.einsum("cu,u->c", table, lsum_centered, optimize=False)
        var_h = np.maximum(sh2 - sh * sh / m, 0.0)
        denom = np.sqrt(var_h * var_l_sum)
        with np.errstate(divide="ignore", invalid="ignore"):
            correlations = np.where(denom > 0, cov / denom, 0.0)
        correlations[const_rows] = 0.0
        correlations = np.clip(correlations, -1.0, 1.0)
    abs_r = np.abs(correlations)
    best = abs_r.max()
    tied = np.nonzero(abs_r >= best - TIE_TOLERANCE)[0]
    if len(tied) == 1:
        pick = tied[0]
        tie_break_used = False
    else:
        deviations = np.abs(sh[tied] - float(samples.sum()))
        pick = tied[int(np.argmin(deviations))]
        tie_break_used = True
    return CpaResult(correlations, int(space.values[pick]), tie_break_used, None)


def _architecture_model(
    architecture: qnn.Architecture, recovered: list[qnn.Layer]
) -> qnn.QuantizedModel:
    """A runnable model carrying the recovered prefix; unrecovered
    parameterized layers hold zeros (they are never executed)."""
    layers = list(recovered)
    for spec in architecture.layers[len(recovered) :]:
        if spec.kind in qnn.PARAMETERIZED_KINDS:
            layers.append(
                qnn.build_layer(
                    spec,
                    np.zeros(spec.shape, dtype=np.int64),
                    np.zeros(spec.shape[0], dtype=np.int64),
                )
            )
        else:
            layers.append(qnn.build_layer(spec))
    return qnn.QuantizedModel(tuple(layers), architecture.input_shape)


@dataclass
class NetworkRecovery:
    model: qnn.QuantizedModel
    layer_recoveries: list[LayerRecovery]


def recover_network(
    architecture: qnn.Architecture, archive, config: AttackConfig
) -> NetworkRecovery:
    """Cascade layer recovery from the input side upward and assemble the
    recovered model."""
    recovered: list[qnn.Layer] = []
    recoveries: list[LayerRecovery] = []
    for index, spec in enumerate(architecture.layers):
        if spec.kind in qnn.PARAMETERIZED_KINDS:
            rec = recover_layer(architecture, index, archive, config, recovered)
            recoveries.append(rec)
            recovered.append(qnn.build_layer(spec, rec.weights, rec.biases))
        else:
            recovered.append(qnn.build_layer(spec))
    model = qnn.QuantizedModel(tuple(recovered), architecture.input_shape)
    return NetworkRecovery(model, recoveries)
