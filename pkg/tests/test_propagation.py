# tests/test_propagation.py

import math

import numpy as np
import pytest

from src.core.errors import NonInvertible
from src.core.propagation import delta_method, monte_carlo


def _defined_only_at_nominal(x: float) -> float:
    if x != 0.5:
        raise ValueError("outside the domain")
    return 1.0


def test_delta_method_is_exact_for_linear_functions():
    value, error = delta_method(lambda x, y: 2.0 * x - y, [1.0, 3.0], [0.1, 0.2])
    assert value == pytest.approx(-1.0)
    assert error == pytest.approx(math.hypot(0.2, 0.2))


def test_monte_carlo_matches_delta_method_for_linear_functions():
    _, propagated = delta_method(lambda x, y: 2.0 * x - y, [1.0, 3.0], [0.1, 0.2])
    _, sampled = monte_carlo(lambda x, y: 2.0 * x - y, [1.0, 3.0], [0.1, 0.2], np.random.default_rng(0))
    assert sampled == pytest.approx(propagated, rel=0.1)


def test_monte_carlo_drops_draws_outside_the_domain():
    _, error = monte_carlo(math.sqrt, [1.0], [0.5], np.random.default_rng(1))
    assert 0.0 < error < 1.0


def test_monte_carlo_needs_two_surviving_draws():
    with pytest.raises(NonInvertible):
        monte_carlo(_defined_only_at_nominal, [0.5], [0.1], np.random.default_rng(2))
