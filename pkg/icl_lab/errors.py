"""
Exception hierarchy for the lab.

SpecError subclasses map to CLI exit code 2, NumericalError subclasses to 3.
"""
from typing import Any, Dict, Optional


class IclLabError(Exception):
    """Base class for every error raised by icl_lab"""


# ------------------------------------------------------------------------------
# Spec / input errors
# ------------------------------------------------------------------------------

class SpecError(IclLabError):
    """The caller asked for something that cannot be satisfied"""


class InvalidConfig(SpecError):
    pass


class InvalidIntervention(SpecError):
    pass


class SequenceTooLong(SpecError):
    def __init__(self, length: int, max_seq: int):
        super().__init__(f"sequence of length {length} exceeds max_seq={max_seq}")
        self.length = length
        self.max_seq = max_seq


class TokenizationError(SpecError):
    def __init__(self, word: str):
        super().__init__(f"word {word!r} is not in the vocabulary")
        self.word = word


class InsufficientPool(SpecError):
    pass


class EmptyGrid(SpecError):
    pass


class UnknownFigureKind(SpecError):
    pass


class ContainerError(SpecError):
    """Malformed weight, filter or hidden-state container"""


class MagicMismatch(ContainerError):
    def __init__(self, expected: bytes, found: bytes):
        super().__init__(f"bad magic: expected {expected!r}, found {found!r}")
        self.expected = expected
        self.found = found


class ShapeMismatch(ContainerError):
    pass


class TruncatedPayload(ContainerError):
    pass


TruncatedDump = TruncatedPayload


# ------------------------------------------------------------------------------
# Numerical errors
# ------------------------------------------------------------------------------

class NumericalError(IclLabError):
    """A computation produced an unusable value"""


class NumericalFailure(NumericalError):
    def __init__(self, message: str, layer: Optional[int] = None):
        where = f" (layer {layer})" if layer is not None else ""
        super().__init__(f"{message}{where}")
        self.layer = layer


class NonFiniteError(NumericalError):
    pass


class DegenerateCloud(NumericalError):
    pass


class NotSymmetric(NumericalError):
    pass


# ------------------------------------------------------------------------------
# Runtime errors
# ------------------------------------------------------------------------------

class MissingTrace(IclLabError):
    def __init__(self, key: Any):
        super().__init__(f"trace has no entry for {key!r}; request it in the TraceSpec")
        self.key = key


class ExperimentError(IclLabError):
    """Wraps a failure inside an experiment with the grid point it happened at"""

    def __init__(self, kind: str, coords: Dict[str, Any], cause: Exception):
        super().__init__(f"{kind} failed at {coords}: {cause}")
        self.kind = kind
        self.coords = coords
        self.cause = cause

    @property
    def exit_code(self) -> int:
        return exit_code_for(self.cause)


def exit_code_for(error: BaseException) -> int:
    """CLI exit code: 2 for spec errors, 3 for numerical failures, 1 otherwise"""
    if isinstance(error, ExperimentError):
        return error.exit_code
    if isinstance(error, SpecError):
        return 2
    if isinstance(error, NumericalError):
        return 3
    if isinstance(error, ValueError):
        # pydantic ValidationError lands here
        return 2
    return 1
