"""Central finite-difference oracle for tape gradients."""

import numpy as np

from src.tools.errors import ContractViolation, NumericFailure
from src.tools.models import LossBuilder, ParamSet, loss_value, unflatten, value_and_grad


def finite_difference_gradient(params: ParamSet, build: LossBuilder, eps: float = 1e-5) -> np.ndarray:
    if eps <= 0:
        raise ContractViolation(f"eps must be positive, got {eps}")
    theta = params.flatten()
    grad = np.zeros_like(theta)
    for i in range(theta.shape[0]):
        bumped = theta.copy()
        bumped[i] = theta[i] + eps
        upper = loss_value(unflatten(bumped, params.arch), build)
        bumped[i] = theta[i] - eps
        lower = loss_value(unflatten(bumped, params.arch), build)
        if not (np.isfinite(upper) and np.isfinite(lower)):
            raise NumericFailure("Non-finite loss while probing", where=f"coordinate {i}")
        grad[i] = (upper - lower) / (2.0 * eps)
    return grad


def check_gradients_fd(build: LossBuilder, params: ParamSet, eps: float = 1e-5) -> float:
    """
    Max over coordinates of |fd - ad| / max(1e-8, |fd| + |ad|).

    Only meaningful on graphs without grad_reverse: the reversal changes the
    adjoint but not the forward function, so the two can never agree there.
    """
    fd = finite_difference_gradient(params, build, eps)
    ad = value_and_grad(params, build).grad
    rel = np.abs(fd - ad) / np.maximum(1e-8, np.abs(fd) + np.abs(ad))
    return float(rel.max()) if rel.size else 0.0
