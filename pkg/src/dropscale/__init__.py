"""Dropout inference laboratory.

Train small feedforward networks with dropout, then compare cheap
inference-time approximations (uniform weight scaling, Monte Carlo mask
averaging, a learned non-uniform scale vector) against the exact average
over every dropout mask, which stays affordable for narrow gated layers.
"""

from ._backend import backend_name
from .data import (Dataset, SplitSpec, read_delimited, read_idx, split,
                   synth_gaussians)
from .errors import (ConfigError, DataFormatError, DimensionMismatchError,
                     DivergenceError, EnumerationLimitError,
                     InfeasibleScaleError, RepairError)
from .inference import (InferenceMethod, McConfig, classification_error,
                        predict, predict_mc, predict_scaled,
                        predict_weight_scaled)
from .network import (DropoutGate, LayerSpec, Masked, NetworkParams, Plain,
                      Scaled, forward, head_forward, load_network,
                      save_network, trunk_forward, validate_layer_specs)
from .oracle import (MAX_GATED_WIDTH, approximation_gap, exact_arithmetic,
                     exact_geometric, mask_count_weights, mask_weight_total)
from .scaleopt import (ConstraintSet, PenaltyConfig, ScaleOptConfig,
                       ScaleOptResult, TraceRecord, check_scale_for_gate,
                       feasibility_repair, load_scale, objective_and_gradient,
                       optimize_scale, penalty, penalty_subgradient,
                       reparametrize, save_scale)
from .tensor import (RngStream, bernoulli_mask, bernoulli_mask_block,
                     cross_entropy, cross_entropy_batch, log_softmax, softmax)
from .trainer import Checkpoint, TrainConfig, init_params, train

__version__ = "0.1.0"

__all__ = [
    "backend_name",
    "Dataset", "SplitSpec", "read_delimited", "read_idx", "split",
    "synth_gaussians",
    "ConfigError", "DataFormatError", "DimensionMismatchError",
    "DivergenceError", "EnumerationLimitError", "InfeasibleScaleError",
    "RepairError",
    "InferenceMethod", "McConfig", "classification_error", "predict",
    "predict_mc", "predict_scaled", "predict_weight_scaled",
    "DropoutGate", "LayerSpec", "Masked", "NetworkParams", "Plain", "Scaled",
    "forward", "head_forward", "load_network", "save_network",
    "trunk_forward", "validate_layer_specs",
    "MAX_GATED_WIDTH", "approximation_gap", "exact_arithmetic",
    "exact_geometric", "mask_count_weights", "mask_weight_total",
    "ConstraintSet", "PenaltyConfig", "ScaleOptConfig", "ScaleOptResult",
    "TraceRecord", "check_scale_for_gate", "feasibility_repair", "load_scale",
    "objective_and_gradient", "optimize_scale", "penalty",
    "penalty_subgradient", "reparametrize", "save_scale",
    "RngStream", "bernoulli_mask", "bernoulli_mask_block", "cross_entropy",
    "cross_entropy_batch", "log_softmax", "softmax",
    "Checkpoint", "TrainConfig", "init_params", "train",
    "__version__",
]
