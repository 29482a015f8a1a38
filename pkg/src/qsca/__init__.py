"""qsca: side-channel analysis laboratory for quantized neural networks.

Simulates power/EM leakage of int8 network inference under Hamming-weight
or per-bit stochastic models, and mounts correlation power analysis to
recover the network's weights and biases, parameter by parameter and layer
by layer.
"""

from .binrep import (
    BitVector,
    decode_ieee754_single,
    decode_twos_complement,
    encode_twos_complement,
    hamming_distance,
    hamming_weight,
)
from .cpa import (
    AttackConfig,
    CorrelationAccumulator,
    CpaResult,
    HypothesisSpace,
    bias_space,
    hamming_weight_attack,
    hypothetical_leakage,
    pearson,
    profiled_attack,
    recover_bias,
    recover_layer,
    recover_network,
    recover_weight,
    weight_space,
)
from .harness import (
    AgreementReport,
    RecoveryReport,
    ScenarioConfig,
    desk_cnn,
    desk_eval_inputs,
    run_bias_recovery_experiment,
    run_network_recovery,
    run_weight_recovery_experiment,
    scenario_config,
    top_k_metric,
)
from .leakage import (
    LeakageModelSpec,
    NetworkLeakageSpec,
    TraceSet,
    hamming_weight_model,
    leak,
    sample_coefficients,
    simulate_bias_traces,
    simulate_network_traces,
    simulate_weight_traces,
    stochastic_model,
)
from .qnn import QuantizedModel, forward, neuron_inputs, random_model
from .rng import derive_rng

__version__ = "0.1.0"
