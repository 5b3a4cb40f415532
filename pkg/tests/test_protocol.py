# tests/test_protocol.py

import math

import numpy as np
import pytest

from src.core.errors import DegenerateDamping, DuplicateN, ImaginaryNutation, InsufficientData, OutOfBranch
from src.core.model import ExperimentParams
from src.core.protocol import (
    EXACT_LEADING_FACTOR,
    ErrorModel,
    ProtocolPoint,
    a_minus_b_from_delta,
    delta_b_from_points,
    end_to_end_recovery,
    estimate_delta_b,
    heterodyne_delta,
    ideal_zeno_survival,
    invert_ratio,
    linearized_slope,
    maximum_error_budget,
    model_delta,
    nutation_phase_n,
    unwrap_phase,
)

TWO_PI = 2 * math.pi
TAU = 0.002


def _exact_point(omega_tau: float, a: float, b: float, n: int, sigma: float = 0.0) -> ProtocolPoint:
    _, s, theta_prime = nutation_phase_n(omega_tau, a, b, n)
    return ProtocolPoint(n=n, theta_prime=theta_prime, theta_prime_error=sigma, s=s)


class TestNutationPhase:
    def test_equal_rates_give_plain_rotation(self):
        theta, s, theta_prime = nutation_phase_n(2.5, 0.3, 0.3, 4)
        assert theta == pytest.approx(10.0)
        assert s == 0 and theta_prime == pytest.approx(10.0)

    def test_damped_single_pulse(self):
        theta, s, theta_prime = nutation_phase_n(TWO_PI, 0.4, 0.2, 1)
        assert theta == pytest.approx(math.sqrt(4 * math.pi ** 2 - 0.04))
        assert theta == pytest.approx(6.28, abs=1e-4)
        assert s == 0 and theta_prime == theta

    def test_damping_shrinks_per_pulse_phase_less_at_larger_n(self):
        theta_1, _, _ = nutation_phase_n(TWO_PI, 0.4, 0.2, 1)
        theta_2, _, _ = nutation_phase_n(TWO_PI, 0.4, 0.2, 2)
        assert theta_2 / 2 > theta_1

    def test_turn_split(self):
        theta, s, theta_prime = nutation_phase_n(TWO_PI + 1.0, 0.1, 0.1, 3)
        assert s == 1
        assert theta == pytest.approx(TWO_PI * 3 * s + theta_prime)
        assert 0.0 <= theta_prime < TWO_PI * 3

    def test_imaginary(self):
        with pytest.raises(ImaginaryNutation):
            nutation_phase_n(0.1, 1.0, 0.0, 1)


class TestHeterodyne:
    def test_equal_per_pulse_phases(self):
        delta = heterodyne_delta(ProtocolPoint(n=2, theta_prime=2.0), ProtocolPoint(n=1, theta_prime=1.0))
        assert delta.value == pytest.approx(0.0)

    def test_error_combination(self):
        point_m = ProtocolPoint(n=100, theta_prime=1.0, theta_prime_error=1e-4)
        point_n = ProtocolPoint(n=1, theta_prime=1.0, theta_prime_error=1e-4)
        assert heterodyne_delta(point_m, point_n).standard_error == pytest.approx(1e-4, rel=1e-3)

    def test_duplicate_n(self):
        with pytest.raises(DuplicateN):
            heterodyne_delta(ProtocolPoint(n=2, theta_prime=1.0), ProtocolPoint(n=2, theta_prime=1.5))


class TestModelDelta:
    def test_reference_values(self):
        infinite = model_delta(TWO_PI, 0.4, 0.2, 0.0, math.inf, 1)
        assert infinite == pytest.approx(6.37e-3, rel=1e-3)
        assert model_delta(TWO_PI, 0.4, 0.2, 0.0, 2, 1) == pytest.approx(0.75 * infinite)
        assert model_delta(TWO_PI, 0.4, 0.2, 0.0, 3, 3) == 0.0
        assert model_delta(TWO_PI, 0.4, 0.2, 0.0, math.inf, 1, leading_factor=EXACT_LEADING_FACTOR) == pytest.approx(
            infinite / 2
        )

    def test_degenerate_damping(self):
        with pytest.raises(DegenerateDamping):
            model_delta(TWO_PI, 0.2, 0.2, 0.01, 2, 1)
        assert model_delta(TWO_PI, 0.2, 0.2, 0.0, 2, 1) == 0.0

    def test_slope_at_zero(self):
        reference = model_delta(TWO_PI, 0.4, 0.2, 0.0, math.inf, 1)

        def ratio(delta_b: float) -> float:
            return model_delta(TWO_PI, 0.4, 0.2, delta_b, 2, 1) / reference

        h = 1e-6
        slope = (ratio(h) - ratio(-h)) / (2 * h)
        assert slope == pytest.approx(linearized_slope(0.2), abs=1e-8)
        assert linearized_slope(0.2) == pytest.approx(-2.5)

    def test_expansion_tracks_exact_phases(self):
        for n, m in ((1, 2), (1, 3), (1, 10), (2, 100), (1, 100)):
            for damping in (0.05, 0.2, 0.5):
                for omega_tau in (TWO_PI + 0.3, 2 * TWO_PI + 1.0, 3 * TWO_PI + 2.0):
                    a, b = damping + 0.1, 0.1
                    exact = heterodyne_delta(_exact_point(omega_tau, a, b, m), _exact_point(omega_tau, a, b, n)).value
                    expansion = model_delta(omega_tau, a, b, 0.0, m, n, leading_factor=EXACT_LEADING_FACTOR)
                    bound = (damping / (n * omega_tau)) ** 4 * omega_tau
                    assert abs(exact - expansion) <= bound + 1e-13


class TestDeltaBInversion:
    def test_zero_change(self):
        assert estimate_delta_b(0.75, 1.0, 0.2).delta_b == pytest.approx(0.0, abs=1e-15)

    def test_round_trip(self):
        reference = model_delta(TWO_PI, 0.4, 0.2, 0.0, math.inf, 1)
        for delta_b in np.linspace(-0.05, 0.05, 21):
            delta_21 = model_delta(TWO_PI, 0.4, 0.2, float(delta_b), 2, 1)
            assert estimate_delta_b(delta_21, reference, 0.2).delta_b == pytest.approx(delta_b, abs=1e-12)

    def test_finite_reference_correction(self):
        delta_m1 = model_delta(TWO_PI, 0.4, 0.2, 0.0, 10, 1)
        delta_21 = model_delta(TWO_PI, 0.4, 0.2, 0.01, 2, 1)
        assert estimate_delta_b(delta_21, delta_m1, 0.2, m=10).delta_b == pytest.approx(0.01, abs=1e-12)
        assert a_minus_b_from_delta(
            model_delta(TWO_PI, 0.4, 0.2, 0.0, 10, 1, leading_factor=EXACT_LEADING_FACTOR), TWO_PI, m=10
        ) == pytest.approx(0.2, rel=1e-12)

    def test_ratio_error(self):
        value, error = invert_ratio(0.75, 0.2, ratio_error=4e-4)
        assert value == pytest.approx(0.0, abs=1e-15)
        assert error == pytest.approx(1.6e-4)

    def test_out_of_branch(self):
        with pytest.raises(OutOfBranch):
            estimate_delta_b(1.2, 1.0, 0.2)
        with pytest.raises(OutOfBranch):
            invert_ratio(1.5, 0.2)

    def test_maximum_budget(self):
        budget = maximum_error_budget(1e-4, 0.2)
        assert budget.delta_error == pytest.approx(2e-4)
        assert budget.ratio_error == pytest.approx(4e-4)
        assert budget.delta_b_error == pytest.approx(1.6e-4, rel=0.15)


class TestProtocolFromPoints:
    @staticmethod
    def _points(sigma: float = 1e-4):
        return [_exact_point(TWO_PI, 0.4, 0.2, n, sigma) for n in (1, 2, 100)]

    def test_maximum_error_model(self):
        estimate = delta_b_from_points(self._points(), TWO_PI, error_model=ErrorModel.MAXIMUM)
        assert abs(estimate.delta_b) < 1e-3
        assert estimate.standard_error == pytest.approx(1.6e-4, rel=0.15)
        assert estimate.a_minus_b1 == pytest.approx(0.2, rel=1e-2)
        assert estimate.m == 100

    def test_error_models_agree_in_linear_regime(self):
        propagated = delta_b_from_points(self._points(), TWO_PI, a_minus_b1=0.2)
        sampled = delta_b_from_points(
            self._points(), TWO_PI, a_minus_b1=0.2, error_model=ErrorModel.MONTE_CARLO, rng=np.random.default_rng(3)
        )
        assert sampled.delta_b == propagated.delta_b
        assert sampled.standard_error == pytest.approx(propagated.standard_error, rel=0.2)

    def test_unwrapped_fits_reproduce_exact_points(self):
        for n in (1, 2, 100):
            theta, s, theta_prime = nutation_phase_n(TWO_PI, 0.4, 0.2, n)
            point = unwrap_phase(theta % TWO_PI, theta, n, 1e-4)
            assert point.s == s
            assert point.theta_prime == pytest.approx(theta_prime, abs=1e-9)

    def test_point_set_validation(self):
        points = self._points()
        with pytest.raises(DuplicateN):
            delta_b_from_points(points + [points[1]], TWO_PI)
        with pytest.raises(InsufficientData):
            delta_b_from_points(points[1:], TWO_PI)
        with pytest.raises(InsufficientData):
            delta_b_from_points(points[:2], TWO_PI)


class TestIdealZeno:
    def test_single_projection(self):
        assert ideal_zeno_survival(math.pi, 1) == pytest.approx(0.0, abs=1e-12)

    def test_hundred_projections(self):
        assert ideal_zeno_survival(math.pi, 100) == pytest.approx(0.9756, abs=1e-4)

    def test_monotone_and_bounded(self):
        values = [ideal_zeno_survival(math.pi, n) for n in range(1, 60)]
        assert all(x <= y for x, y in zip(values, values[1:]))
        for n in (100, 1000, 10000):
            assert 1 - ideal_zeno_survival(math.pi, n) <= math.pi ** 2 / (4 * n)


class TestEndToEnd:
    @staticmethod
    def _base(measurements: int) -> ExperimentParams:
        return ExperimentParams(
            rabi_frequency=(TWO_PI + math.pi / 4) / TAU,
            drive_duration=TAU,
            ground_branching_factor=1.0,
            metastable_mixing_factor=1.0,
            measurements_per_trajectory=measurements,
        )

    def test_reference_cannot_repeat_n(self):
        with pytest.raises(DuplicateN):
            end_to_end_recovery(self._base(1000), 1.25, 0.05, 0.04, 0.05, 2, 1, master_seed=0)

    def test_recovers_decay_change(self):
        base = self._base(1_500_000)
        estimate = end_to_end_recovery(base, 1.25, 0.05, 0.04, 0.05, 10, 2, master_seed=2024, threads=3)
        assert all(point.theta_prime_error <= 1e-2 for point in estimate.points)
        assert abs(estimate.delta_b - 0.01) <= 3 * estimate.standard_error
        assert estimate.a_minus_b1 == pytest.approx(1.2, abs=3 * estimate.a_minus_b1_error + 0.05)

        serial = end_to_end_recovery(base, 1.25, 0.05, 0.04, 0.05, 10, 2, master_seed=2024, threads=1)
        assert serial == estimate

    def test_unchanged_decay_gives_null_estimate(self):
        base = self._base(1_500_000)
        estimate = end_to_end_recovery(base, 1.25, 0.05, 0.05, 0.05, 10, 2, master_seed=77, threads=3)
        assert abs(estimate.delta_b) <= 3 * estimate.standard_error
