# gmmcomet/core/errors.py
from typing import Optional


class GmmCometError(Exception):
    """Base class for every error raised by gmmcomet."""


class ConfigurationError(GmmCometError):
    """Invalid configuration: dimensions, ranges, splits or unknown keys."""

    def __init__(self, message: str, field: Optional[str] = None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class ContractViolation(GmmCometError):
    """A caller broke an operation's precondition."""


class NumericalError(GmmCometError):
    def __init__(self, message: str, class_index: Optional[int] = None):
        self.class_index = class_index
        if class_index is not None:
            message = f"{message} (class {class_index})"
        super().__init__(message)


class DegenerateInputError(NumericalError):
    """Likelihood vector is all zero: the sample is infinitely far from every class."""


class CalibrationError(GmmCometError):
    """OOD scoring requested before any GMM class is initialized."""


class NonFiniteLossError(GmmCometError):
    def __init__(self, term: str, value: float):
        self.term = term
        self.value = value
        super().__init__(f"Loss term '{term}' is not finite: {value}")


class NonFiniteGradientError(GmmCometError):
    def __init__(self, array_name: str):
        self.array_name = array_name
        super().__init__(f"Gradient for '{array_name}' contains NaN or Inf; step aborted")


class ScenarioTooHardError(GmmCometError):
    def __init__(self, accuracy: float, floor: float):
        self.accuracy = accuracy
        super().__init__(
            f"Source pretraining reached only {accuracy:.3f} train accuracy (< {floor:.2f}); "
            "scenario is too hard for the source model"
        )


class StreamError(GmmCometError):
    def __init__(self, message: str, batch_index: int):
        self.batch_index = batch_index
        super().__init__(f"batch {batch_index}: {message}")
