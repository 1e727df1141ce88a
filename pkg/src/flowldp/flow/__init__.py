from .layers import (
    ActNorm,
    Coupling,
    FixedPermutation,
    Invertible1x1,
    Split,
    Squeeze,
    squeeze,
    unsqueeze,
)
from .model import (
    FlowModel,
    build_model,
    encode_dataset,
    forward,
    inverse,
    log_prob,
    randomize_parameters,
)
from .checkpoint import deserialize_model, load_model, save_model, serialize_model

__all__ = [
    "ActNorm",
    "Coupling",
    "FixedPermutation",
    "FlowModel",
    "Invertible1x1",
    "Split",
    "Squeeze",
    "build_model",
    "deserialize_model",
    "encode_dataset",
    "forward",
    "inverse",
    "load_model",
    "log_prob",
    "randomize_parameters",
    "save_model",
    "serialize_model",
    "squeeze",
    "unsqueeze",
]
