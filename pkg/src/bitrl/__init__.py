"""Ternary-quantized state encoders with frozen-backbone PPO heads."""

from .backbone import BackboneConfig, BackboneModel, build_backbone, encode
from .heads import (HeadParams, apply_update, backward, forward,
                    init_policy_head, init_value_head, policy_forward,
                    value_forward)
from .kernels import (QuantizedActivations, bench_matvec,
                      quantize_activations, ternary_matvec,
                      ternary_matvec_reference)
from .ppo import TrainConfig, evaluate, parse_config, train
from .quantization import (QuantConfig, TernaryTensor, dequantize,
                           measure_perturbation, pack_trits, quantize,
                           unpack_trits)
from .tensor_core import (DegenerateInputError, RngStream, ShapeError,
                          TritFormatError, entropy, softmax,
                          spectral_norm_upper_bound)
from .text import MAX_TOKENS, Vocabulary, default_vocabulary, serialize_state

__version__ = "0.1.0"

__all__ = [
    "BackboneConfig", "BackboneModel", "build_backbone", "encode",
    "HeadParams", "apply_update", "backward", "forward",
    "init_policy_head", "init_value_head", "policy_forward", "value_forward",
    "QuantizedActivations", "bench_matvec", "quantize_activations",
    "ternary_matvec", "ternary_matvec_reference",
    "TrainConfig", "evaluate", "parse_config", "train",
    "QuantConfig", "TernaryTensor", "dequantize", "measure_perturbation",
    "pack_trits", "quantize", "unpack_trits",
    "DegenerateInputError", "RngStream", "ShapeError", "TritFormatError",
    "entropy", "softmax", "spectral_norm_upper_bound",
    "MAX_TOKENS", "Vocabulary", "default_vocabulary", "serialize_state",
    "__version__",
]
