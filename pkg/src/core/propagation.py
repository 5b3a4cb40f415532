# src/core/propagation.py

from typing import Callable, Sequence, Tuple

import numpy as np

from src.core.errors import NonInvertible


def jacobian(func: Callable[..., float], values: Sequence[float], rel_step: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function of several inputs."""
    x = np.asarray(values, dtype=float)
    grad = np.empty_like(x)
    for i in range(x.size):
        h = rel_step * max(abs(x[i]), 1.0)
        up = x.copy()
        down = x.copy()
        up[i] += h
        down[i] -= h
        grad[i] = (func(*up) - func(*down)) / (2.0 * h)
    return grad


def delta_method(
    func: Callable[..., float],
    values: Sequence[float],
    covariance: np.ndarray,
) -> Tuple[float, float]:
    """
    First-order propagation of input uncertainties through `func`.

    Args:
        func (Callable): Scalar function of len(values) positional arguments.
        values (Sequence[float]): Point estimates.
        covariance (np.ndarray): Covariance of the inputs; a 1-d array is read as
                                 standard errors of independent inputs.

    Returns:
        Tuple[float, float]: func(values) and its standard error.
    """
    cov = np.asarray(covariance, dtype=float)
    if cov.ndim == 1:
        cov = np.diag(cov ** 2)
    grad = jacobian(func, values)
    variance = float(grad @ cov @ grad)
    return float(func(*values)), float(np.sqrt(max(variance, 0.0)))


def monte_carlo(
    func: Callable[..., float],
    values: Sequence[float],
    covariance: np.ndarray,
    rng: np.random.Generator,
    draws: int = 2000,
) -> Tuple[float, float]:
    """Same contract as delta_method, with the spread taken from Gaussian resampling."""
    cov = np.asarray(covariance, dtype=float)
    if cov.ndim == 1:
        cov = np.diag(cov ** 2)
    samples = rng.multivariate_normal(np.asarray(values, dtype=float), cov, size=draws)
    outputs = []
    for row in samples:
        try:
            outputs.append(func(*row))
        except ValueError:
            # draws outside the function's domain are dropped
            continue
    if len(outputs) < 2:
        raise NonInvertible(f"only {len(outputs)} of {draws} resampled inputs lie in the function's domain")
    return float(func(*values)), float(np.std(outputs, ddof=1))
