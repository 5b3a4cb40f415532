# tests/test_statistics.py

import math

import numpy as np
import pytest
from pydantic import ValidationError

from src.core.errors import (
    DegenerateHistogram,
    EmptyTrajectory,
    InsufficientData,
    NoGroundOccurrences,
    NonInvertible,
    NoRuns,
)
from src.core.model import ExperimentParams, MeasurementOutcome, Trajectory, coherent_survival, derive_rates
from src.core.statistics import (
    RunHistogram,
    chain_fit,
    compare_histograms,
    compare_models,
    excitation_probability,
    fit_parameters,
    geometric_mle,
    invert_phase,
    invert_relaxation,
    markov_order_test,
    normalized_sequence_prob,
    pooled_excitation_probability,
    pooled_histogram,
    run_histogram,
)
from src.core.trajectory import SimMode, simulate_ensemble, simulate_trajectory

ON = MeasurementOutcome.ON
OFF = MeasurementOutcome.OFF
TAU = 0.002


def _trajectory(outcomes: str) -> Trajectory:
    params = ExperimentParams(rabi_frequency=1.0, drive_duration=TAU, measurements_per_trajectory=len(outcomes))
    return Trajectory(outcomes=outcomes, params=params)


def _fit_params(measurements: int = 500) -> ExperimentParams:
    """p₀ ≈ 0.9 with f₀ = 1/2, f₁ = 0.8, θ′ = 0.75."""
    a, b = 0.15, 0.05
    omega_tau = math.sqrt((2 * math.pi + 0.75) ** 2 + (a - b) ** 2)
    return ExperimentParams.from_relaxation(
        omega_tau / TAU,
        TAU,
        a,
        b,
        ground_branching_factor=0.5,
        metastable_mixing_factor=0.8,
        measurements_per_trajectory=measurements,
    )


def _coherent_histogram(omega_tau: float, runs: int, rng: np.random.Generator) -> RunHistogram:
    """On runs drawn from the no-reduction law, survival cos²(qΩτ/2) held at its running minimum."""
    survival = np.minimum.accumulate([coherent_survival(omega_tau, q) for q in range(64)])
    probabilities = survival[:-1] - survival[1:]
    lengths = rng.choice(np.arange(1, 64), size=runs, p=probabilities / probabilities.sum())
    values, counts = np.unique(lengths, return_counts=True)
    return RunHistogram(
        on_runs={int(q): int(c) for q, c in zip(values, counts)},
        total_measurements=int(lengths.sum()),
    )


class TestRunHistogram:
    def test_all_on(self):
        hist = run_histogram(_trajectory("0000"))
        assert hist.on_runs == {4: 1}
        assert hist.off_runs == {}

    def test_alternating(self):
        hist = run_histogram(_trajectory("0101"))
        assert hist.on_runs == {1: 2}
        assert hist.off_runs == {1: 2}

    def test_mixed(self):
        hist = run_histogram(_trajectory("0011101"))
        assert hist.on_runs == {2: 1, 1: 1}
        assert hist.off_runs == {3: 1, 1: 1}
        assert hist.cumulative(ON) == {1: 2, 2: 1}
        assert hist.cumulative(OFF) == {1: 2, 2: 1, 3: 1}

    def test_runs_cover_every_measurement(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            n = int(rng.integers(1, 300))
            outcomes = "".join(rng.choice(["0", "1"], size=n))
            hist = run_histogram(_trajectory(outcomes))
            covered = sum(q * c for q, c in hist.on_runs.items()) + sum(q * c for q, c in hist.off_runs.items())
            assert covered == n

    def test_conservation_is_validated(self):
        with pytest.raises(ValidationError):
            RunHistogram(on_runs={2: 1}, off_runs={}, total_measurements=3)

    def test_empty_trajectory(self):
        with pytest.raises(EmptyTrajectory):
            run_histogram(_trajectory(""))

    def test_merge_is_commutative(self):
        first = run_histogram(_trajectory("0011101"))
        second = run_histogram(_trajectory("0100011"))
        assert first.merge(second) == second.merge(first)
        assert first.merge(second).total_measurements == 14
        assert pooled_histogram([_trajectory("0011101"), _trajectory("0100011")]) == first.merge(second)


class TestSequenceProbability:
    def test_never_changing(self):
        hist = run_histogram(_trajectory("00000"))
        assert normalized_sequence_prob(hist, ON) == {q: 1.0 for q in range(1, 6)}

    def test_always_changing(self):
        hist = run_histogram(_trajectory("01" * 10))
        assert normalized_sequence_prob(hist, ON) == {1: 1.0}

    def test_exact_and_cumulative_counts(self):
        hist = run_histogram(_trajectory("00100010"))
        assert normalized_sequence_prob(hist, ON, cumulative=False) == {1: 1.0, 2: 1.0, 3: 1.0}
        assert normalized_sequence_prob(hist, ON) == pytest.approx({1: 1.0, 2: 2 / 3, 3: 1 / 3})
        with pytest.raises(NoRuns):
            normalized_sequence_prob(run_histogram(_trajectory("0000")), ON, cumulative=False)

    def test_no_runs(self):
        with pytest.raises(NoRuns):
            normalized_sequence_prob(run_histogram(_trajectory("0000")), OFF)

    def test_geometric_chain(self, undamped):
        omega_tau = 2 * math.acos(math.sqrt(0.8))
        trajectory = simulate_trajectory(undamped(omega_tau, measurements=100_000), SimMode.ANALYTIC_MARKOV, seed=8)
        hist = run_histogram(trajectory)
        ratios = normalized_sequence_prob(hist, ON)
        first = hist.cumulative(ON)[1]
        values = list(ratios.values())
        assert all(x >= y for x, y in zip(values, values[1:]))
        for q in range(1, 11):
            expected = 0.8 ** (q - 1)
            sigma = math.sqrt(expected * (1 - expected) / first)
            assert abs(ratios[q] - expected) <= 4 * sigma + 1e-12


class TestGeometricFit:
    def test_mle_and_error(self):
        fit = geometric_mle({1: 2, 3: 1, 4: 1})
        assert fit.repeat_prob == pytest.approx(5 / 9)
        assert fit.standard_error == pytest.approx(math.sqrt(5 / 9 * 4 / 9 / 9))
        assert fit.trials == 9

    def test_censoring_reduces_terminations(self):
        fit = geometric_mle({5: 2}, censored=1)
        assert fit.repeat_prob == pytest.approx(9 / 10)
        assert fit.terminated_runs == 1

    def test_no_runs(self):
        with pytest.raises(NoRuns):
            geometric_mle({})

    def test_chain_fit_counts_adjacent_pairs(self):
        fit = chain_fit([_trajectory("00101")], ON)
        assert fit.repeat_prob == pytest.approx(1 / 3)
        assert fit.trials == 3
        assert chain_fit([_trajectory("00101")], OFF).repeat_prob == 0.0
        with pytest.raises(NoRuns):
            chain_fit([_trajectory("0")], ON)

    def test_error_shrinks_with_data(self):
        params = _fit_params(20_000)
        errors = [
            chain_fit(simulate_ensemble(params, SimMode.ANALYTIC_MARKOV, count, master_seed=count).trajectories, ON).standard_error
            for count in (10, 20, 40)
        ]
        for larger, smaller in zip(errors, errors[1:]):
            assert larger / smaller == pytest.approx(math.sqrt(2), rel=0.2)

    def test_calibration_recovers_repeat_probability(self):
        params = _fit_params()
        p0 = derive_rates(params).repeat_prob_on
        ensemble = simulate_ensemble(params, SimMode.ANALYTIC_MARKOV, 20, master_seed=3)
        fit = chain_fit(ensemble.trajectories, ON)
        assert abs(fit.repeat_prob - p0) <= 3.5 * fit.standard_error


class TestModelComparison:
    def test_exact_collapse_histogram(self, undamped):
        rates = derive_rates(undamped(math.pi / 2))
        hist = RunHistogram(on_runs={1: 8, 2: 4, 3: 2, 4: 2}, off_runs={1: 16}, total_measurements=46)
        result = compare_models(hist, rates, ON)
        assert result.collapse.statistic == pytest.approx(0.0, abs=1e-9)
        assert result.collapse.p_value == pytest.approx(1.0)
        assert result.coherent.p_value == 0.0
        assert result.preferred == "collapse"

    def test_simulated_chain_prefers_collapse(self, undamped):
        params = undamped(math.pi / 2, measurements=100_000)
        rates = derive_rates(params)
        hist = run_histogram(simulate_trajectory(params, SimMode.ANALYTIC_MARKOV, seed=12))
        result = compare_models(hist, rates, ON)
        assert result.collapse.p_value > 0.01
        assert result.coherent.p_value < 1e-6

    def test_prefers_generating_model(self, undamped):
        params = undamped(math.pi / 2, measurements=100_000)
        rates = derive_rates(params)
        collapse_wins = coherent_wins = 0
        for seed in range(100):
            collapse_hist = run_histogram(simulate_trajectory(params, SimMode.ANALYTIC_MARKOV, seed=seed))
            coherent_hist = _coherent_histogram(rates.omega_tau, 33_000, np.random.default_rng(seed))
            collapse_wins += compare_models(collapse_hist, rates, ON).preferred == "collapse"
            coherent_wins += compare_models(coherent_hist, rates, ON).preferred == "coherent"
        assert collapse_wins >= 95
        assert coherent_wins >= 95

    def test_single_length_is_degenerate(self, undamped):
        hist = run_histogram(_trajectory("01" * 20))
        with pytest.raises(DegenerateHistogram):
            compare_models(hist, derive_rates(undamped(math.pi)), ON)

    def test_two_sample_homogeneity(self, section8_params):
        params = section8_params.model_copy(update={"measurements_per_trajectory": 20_000})
        first = pooled_histogram(simulate_ensemble(params, SimMode.ANALYTIC_MARKOV, 5, master_seed=10).trajectories)
        second = pooled_histogram(simulate_ensemble(params, SimMode.ANALYTIC_MARKOV, 5, master_seed=11).trajectories)
        result = compare_histograms(first, second, ON)
        assert 0.0 <= result.p_value <= 1.0
        assert result.p_value > 0.001

    def test_alternating_record_passes_markov_test(self):
        assert markov_order_test(_trajectory("01" * 50)).p_value == 1.0
        with pytest.raises(InsufficientData):
            markov_order_test(_trajectory("01"))


class TestExcitation:
    @pytest.mark.parametrize("outcomes, expected", [("0000", 0.0), ("0101", 1.0), ("0010", 0.5)])
    def test_fraction(self, outcomes, expected):
        assert excitation_probability(_trajectory(outcomes)).probability == pytest.approx(expected)

    def test_no_ground(self):
        with pytest.raises(NoGroundOccurrences):
            excitation_probability(_trajectory("1111"))

    def test_too_short(self):
        with pytest.raises(InsufficientData):
            excitation_probability(_trajectory("0"))

    def test_pooled(self):
        estimate = pooled_excitation_probability([_trajectory("0000"), _trajectory("0101"), _trajectory("0")])
        assert estimate.ground_occurrences == 5
        assert estimate.excitations == 2


class TestInversion:
    def test_relaxation_round_trip(self, section8_params):
        params = section8_params.model_copy(update={"rabi_frequency": (2 * math.pi + 1.0) / TAU})
        rates = derive_rates(params)
        relaxation = invert_relaxation(
            rates.repeat_prob_on, params.ground_branching_factor, rates.coherent_weight_ground, rates.nutation_phase_total
        )
        assert relaxation == pytest.approx(0.6, abs=1e-10)

    def test_phase_round_trip(self, section8_params):
        params = section8_params.model_copy(update={"rabi_frequency": (2 * math.pi + 1.0) / TAU})
        rates = derive_rates(params)
        inversion = invert_phase(
            rates.repeat_prob_on, params.ground_branching_factor, rates.coherent_weight_ground, 0.6, rates.fractional_phase
        )
        assert inversion.phase == pytest.approx(rates.fractional_phase, abs=1e-10)
        assert inversion.alternate_phase == pytest.approx(2 * math.pi - rates.fractional_phase, abs=1e-10)

    def test_lower_branch_seed(self):
        cosine = math.cos(4.0)
        p = 1 - 0.5 * 0.5 * (1 - cosine)
        assert invert_phase(p, 0.5, 0.5, 0.0, 4.1).phase == pytest.approx(4.0)

    def test_out_of_range_cosine(self):
        with pytest.raises(NonInvertible):
            invert_phase(1.0, 0.5, 0.5, 1.0, 1.0)
        assert invert_phase(1.0, 0.5, 0.5, 1e-6, 1.0, cosine_error=1e-3).clipped

    def test_vanishing_cosine(self):
        with pytest.raises(NonInvertible):
            invert_relaxation(0.8, 0.5, 0.5, math.pi / 2)


class TestFitParameters:
    def test_noiseless_alternation(self, undamped):
        params = undamped(math.pi, measurements=500)
        trajectories = [Trajectory(outcomes="01" * 250, seed=i, params=params) for i in range(3)]
        report = fit_parameters(trajectories)
        assert report.fractional_phase == pytest.approx(math.pi, abs=0.05)
        assert report.total_relaxation == pytest.approx(0.0, abs=0.02)
        assert report.mixing_factor == pytest.approx(1.0, abs=0.01)
        assert report.trajectories == 3

    def test_needs_two_trajectories(self, section8_params):
        ensemble = simulate_ensemble(section8_params, SimMode.ANALYTIC_MARKOV, 1, master_seed=0)
        with pytest.raises(InsufficientData):
            fit_parameters(ensemble)

    def test_recovery_coverage(self):
        params = _fit_params()
        rates = derive_rates(params)
        p0_hits = f1_hits = 0
        for repetition in range(100):
            report = fit_parameters(simulate_ensemble(params, SimMode.ANALYTIC_MARKOV, 20, master_seed=1000 + repetition))
            p0 = report.repeat_prob_on
            if abs(p0.repeat_prob - rates.repeat_prob_on) <= 3 * p0.standard_error:
                p0_hits += 1
            if abs(report.mixing_factor - 0.8) <= 3 * report.mixing_factor_error:
                f1_hits += 1
        assert p0_hits >= 95
        assert f1_hits >= 95

    def test_known_relaxation_skips_calibration(self):
        params = _fit_params(5000)
        report = fit_parameters(simulate_ensemble(params, SimMode.ANALYTIC_MARKOV, 5, master_seed=4), calibration_relaxation=0.2)
        assert report.total_relaxation == 0.2
        assert report.total_relaxation_error == 0.0
        assert report.fractional_phase == pytest.approx(0.75, abs=5 * report.fractional_phase_error + 1e-3)
        assert 0.0 <= report.goodness_of_fit.p_value <= 1.0
