"""Exception types shared across the package."""


class DataError(ValueError):
    """Input data is malformed, inconsistent, or missing."""


class DegenerateInputError(DataError):
    """Input is valid in form but carries no usable signal (all-zero, zero variance)."""


class NiftiError(DataError):
    pass


class DescriptorError(DataError):
    pass


class CheckpointError(DataError):
    pass


class NumericalError(ArithmeticError):
    """Non-finite values or divergence during optimization."""
