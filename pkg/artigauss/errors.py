import numpy as np


class ArtigaussError(Exception):
    pass


class InvalidParameterError(ArtigaussError, ValueError):
    pass


class InvalidInputError(ArtigaussError):
    """Malformed or inconsistent input file."""
    pass


class NumericalFailure(ArtigaussError):

    def __init__(self, message, component=None, step=None, breakdown=None):
        super().__init__(message)
        self.component = component
        self.step = step
        self.breakdown = dict(breakdown) if breakdown is not None else {}


def check_finite(name, value):
    value = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(value)):
        raise InvalidParameterError(f"[artigauss] {name} must be finite.")
    return value
