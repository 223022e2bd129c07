"""Exception types shared across the package."""

import numpy as np


class InvalidArgumentError(ValueError):
    """An argument violates a documented precondition."""


class SingularSystemError(np.linalg.LinAlgError):
    """Normal equations are singular and no regularization was requested."""


class MissingParameterError(KeyError):
    """A model parameter was requested for an (action, observation) pair outside the model."""


class InvalidStateError(RuntimeError):
    """An episode was stepped after it finished."""


class UndefinedHistoryError(ValueError):
    """A history has zero likelihood under the environment kernels."""
