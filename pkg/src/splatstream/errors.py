"""Exception taxonomy shared by every module.

Each exception carries a short machine-readable ``code`` so the CLI can emit
single-line, grep-able error output.
"""


class SplatStreamError(Exception):
    code = "ERR"


class StructuralError(SplatStreamError):
    """Shape/count/ordering contract violated by the caller."""

    code = "STRUCTURAL"


class ValidationError(SplatStreamError):
    """Non-finite or out-of-range values in otherwise well-shaped input."""

    code = "VALIDATION"


class CapacityError(SplatStreamError):
    """Primitive count exceeded the attribute-image capacity of its group."""

    code = "CAPACITY"


class TrainingError(SplatStreamError):
    """Optimization diverged; carries the iteration where it happened."""

    code = "TRAINING"

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class DecodeError(SplatStreamError):
    """Corrupt or truncated wire payload."""

    code = "DECODE"


class ProtocolError(SplatStreamError):
    """Client-side reconstruction attempted out of protocol order."""

    code = "PROTOCOL"


class TraceExhaustedError(SplatStreamError):
    """Bandwidth trace does not cover the simulated session."""

    code = "TRACE"


class MissingArtifactError(SplatStreamError):
    """A pipeline stage was invoked before its inputs exist on disk."""

    code = "MISSING_ARTIFACT"


class InfeasibleError(SplatStreamError):
    """No pruning level fits the stated budget for some frame."""

    code = "INFEASIBLE"
