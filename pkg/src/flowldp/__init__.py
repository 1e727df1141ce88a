"""Locally differentially private image obfuscation via a normalizing flow.

The package trains a small Glow-style flow on grayscale images, calibrates a
per-element Laplace mechanism in the flow's latent space, and evaluates the
privacy-utility tradeoff with a dual-flow likelihood detector.  See the CLI
(``flowldp --help``) for the end-to-end workflow.
"""

from . import detection, images, mechanism, synth, training, verifier
from .errors import (
    ConfigError,
    FlowLdpError,
    FormatError,
    NumericError,
    TrainingDiverged,
    UsageError,
)
from .flow import (
    FlowModel,
    build_model,
    encode_dataset,
    forward,
    inverse,
    load_model,
    log_prob,
    save_model,
    squeeze,
    unsqueeze,
)
from .mechanism import (
    PrivacyParams,
    clip_latent,
    compute_clip_params,
    compute_sensitivity,
    epsilon_decompose,
    laplace_privatize,
    laplace_sample,
    load_params,
    make_privacy_params,
    parse_epsilon,
    privatize_image,
    privatize_pixels,
    save_params,
)
from .detection import ScoreEntry, ScoreSet, auc, posterior_score, utility_curve
from .synth import (
    apply_block_marker,
    apply_flip,
    gen_toy_image,
    generate_dataset,
    load_manifest,
    obfuscation_metrics,
)
from .images import read_pgm, write_pgm
from .training import TrainConfig, backward, nll_loss, train
from .verifier import verify_ldp

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "FlowLdpError",
    "FlowModel",
    "FormatError",
    "NumericError",
    "PrivacyParams",
    "ScoreEntry",
    "ScoreSet",
    "TrainConfig",
    "TrainingDiverged",
    "UsageError",
    "apply_block_marker",
    "apply_flip",
    "auc",
    "backward",
    "build_model",
    "clip_latent",
    "compute_clip_params",
    "compute_sensitivity",
    "detection",
    "encode_dataset",
    "epsilon_decompose",
    "forward",
    "gen_toy_image",
    "generate_dataset",
    "images",
    "inverse",
    "laplace_privatize",
    "laplace_sample",
    "load_manifest",
    "load_model",
    "load_params",
    "log_prob",
    "make_privacy_params",
    "mechanism",
    "nll_loss",
    "obfuscation_metrics",
    "parse_epsilon",
    "posterior_score",
    "privatize_image",
    "privatize_pixels",
    "read_pgm",
    "save_model",
    "save_params",
    "squeeze",
    "synth",
    "train",
    "training",
    "unsqueeze",
    "utility_curve",
    "verifier",
    "verify_ldp",
    "write_pgm",
]
