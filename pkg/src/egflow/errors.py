"""Exception taxonomy shared by every module."""


class EgflowError(Exception):
    """Base class for all library errors."""


class DimensionError(EgflowError):
    """Incompatible array shapes or layer sizes."""


class DomainError(EgflowError):
    """Argument outside its mathematical domain (e.g. t not in [0, 1])."""


class SingularityError(DomainError):
    """Evaluation at a point where the expression diverges (e.g. t = 1)."""


class StateError(EgflowError):
    """Operation invoked in the wrong order (e.g. backward before forward)."""


class NumericError(EgflowError):
    """NaN/Inf encountered where finite values are required."""


class InputError(EgflowError):
    """Invalid user-supplied data (empty dataset, bad spec, ...)."""


class CorruptionError(EgflowError):
    """Checkpoint or dataset payload inconsistent with its manifest."""


class DegenerateError(EgflowError):
    """A density collapsed to zero total mass."""


class CoverageError(EgflowError):
    """Too few samples land inside the estimation support."""


class ConfigError(EgflowError):
    """Invalid or unknown configuration key/value."""
