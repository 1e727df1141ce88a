"""Exception taxonomy shared by all modules.

The CLI maps these onto exit codes: usage/configuration problems exit 2,
file format and I/O problems exit 3, numeric failures and verification
failures exit 1.
"""


class FlowLdpError(Exception):
    """Base class for all errors raised by this package."""


class UsageError(FlowLdpError):
    """Caller passed arguments that can never be valid (empty batch, ...)."""


class ConfigError(FlowLdpError):
    """Inconsistent configuration, e.g. shape mismatch or odd squeeze input."""


class NumericError(FlowLdpError):
    """Non-finite value produced during flow evaluation or training.

    ``layer_index`` identifies the offending layer when known.
    """

    def __init__(self, message, layer_index=None):
        super().__init__(message)
        self.layer_index = layer_index


class FormatError(FlowLdpError):
    """Malformed binary file (checkpoint, params sidecar, PGM image).

    ``offset`` is the byte position at which parsing failed, when known.
    """

    def __init__(self, message, offset=None):
        super().__init__(message)
        self.offset = offset


class TrainingDiverged(FlowLdpError):
    """Training NLL became non-finite.

    Carries the last model state that still produced a finite loss so the
    caller can checkpoint it.
    """

    def __init__(self, message, last_good_model=None, metrics=None):
        super().__init__(message)
        self.last_good_model = last_good_model
        self.metrics = metrics
