"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Shapes, axes or channel counts passed to an operation are inconsistent."""


class NonFiniteError(ArithmeticError):
    """An operation produced or received NaN/inf values."""


class ContractError(RuntimeError):
    """An operation was called outside its contract (e.g. non-scalar loss)."""


class InvalidBatchError(ValueError):
    """Batch statistics were requested on fewer than two elements."""


class EmptyForegroundError(ValueError):
    """A masked reduction found no foreground pixels."""


class InvalidCornerError(ValueError):
    """Background-plane fitting requires the four corner pixels to be valid."""


class FormatError(ValueError):
    """A serialized tensor/checkpoint file is malformed or truncated."""


class DegenerateLabelsError(ValueError):
    """A ranking metric needs both classes present in the labels."""
