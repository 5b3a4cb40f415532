# src/core/statistics.py

import logging
import math
from functools import reduce
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import stats

from src.core.errors import (
    DegenerateHistogram,
    EmptyTrajectory,
    InsufficientData,
    InvalidParams,
    NoGroundOccurrences,
    NonInvertible,
    NoRuns,
)
from src.core.model import (
    TWO_PI,
    DerivedRates,
    MeasurementOutcome,
    Trajectory,
    block_rates,
    coherent_survival,
    survival_probability,
)
from src.core.propagation import delta_method
from src.core.trajectory import EnsembleResult

logger = logging.getLogger(__name__)

MIN_EXPECTED_COUNT = 5.0
CENSORING_FRACTION = 0.1
AMBIGUITY_SIGMAS = 3.0


class RunHistogram(BaseModel):
    """Exact-length counts of maximal runs; pooling is a commutative merge."""
    model_config = ConfigDict(frozen=True)

    on_runs: Dict[int, int] = Field(default_factory=dict)
    off_runs: Dict[int, int] = Field(default_factory=dict)
    total_measurements: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _conservation(self) -> "RunHistogram":
        for runs in (self.on_runs, self.off_runs):
            if any(q < 1 or count < 0 for q, count in runs.items()):
                raise ValueError("run lengths must be >= 1 and counts >= 0")
        covered = sum(q * c for q, c in self.on_runs.items()) + sum(q * c for q, c in self.off_runs.items())
        if covered != self.total_measurements:
            raise ValueError(f"runs cover {covered} measurements, histogram claims {self.total_measurements}")
        return self

    def runs(self, species: MeasurementOutcome) -> Dict[int, int]:
        return self.on_runs if species == MeasurementOutcome.ON else self.off_runs

    def longest(self, species: MeasurementOutcome) -> int:
        present = [q for q, c in self.runs(species).items() if c > 0]
        return max(present) if present else 0

    def cumulative(self, species: MeasurementOutcome) -> Dict[int, int]:
        """U(q): number of runs of length ≥ q, for q = 1..longest."""
        runs = self.runs(species)
        longest = self.longest(species)
        counts = np.zeros(longest + 2, dtype=np.int64)
        for q, c in runs.items():
            counts[q] += c
        tail = np.cumsum(counts[::-1])[::-1]
        return {q: int(tail[q]) for q in range(1, longest + 1)}

    def merge(self, other: "RunHistogram") -> "RunHistogram":
        def _add(left: Mapping[int, int], right: Mapping[int, int]) -> Dict[int, int]:
            merged = dict(left)
            for q, c in right.items():
                merged[q] = merged.get(q, 0) + c
            return dict(sorted(merged.items()))

        return RunHistogram(
            on_runs=_add(self.on_runs, other.on_runs),
            off_runs=_add(self.off_runs, other.off_runs),
            total_measurements=self.total_measurements + other.total_measurements,
        )


class GeometricFit(BaseModel):
    repeat_prob: float = Field(ge=0.0, le=1.0)
    standard_error: float = Field(ge=0.0)
    terminated_runs: int
    trials: int


class GoodnessOfFit(BaseModel):
    statistic: float
    p_value: float = Field(ge=0.0, le=1.0)
    dof: int
    bins: int


class ModelComparison(BaseModel):
    species: MeasurementOutcome
    collapse: GoodnessOfFit
    coherent: GoodnessOfFit

    @property
    def preferred(self) -> str:
        return "collapse" if self.collapse.p_value >= self.coherent.p_value else "coherent"


class ExcitationEstimate(BaseModel):
    probability: float = Field(ge=0.0, le=1.0)
    standard_error: float = Field(ge=0.0)
    ground_occurrences: int
    excitations: int


class PhaseInversion(BaseModel):
    phase: float
    alternate_phase: float
    clipped: bool = False


class FitReport(BaseModel):
    """Fitted a+b, θ′ and f₁ with standard errors, plus the repeat probabilities they came from."""
    total_relaxation: float
    total_relaxation_error: float = Field(ge=0.0)
    fractional_phase: float
    fractional_phase_error: float = Field(ge=0.0)
    alternate_phase: float
    phase_ambiguous: bool
    mixing_factor: float
    mixing_factor_error: float = Field(ge=0.0)
    calibration_repeat_prob: GeometricFit
    repeat_prob_on: GeometricFit
    repeat_prob_off: GeometricFit
    goodness_of_fit: GoodnessOfFit
    trajectories: int


def _runs(codes: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Symbols and lengths of the maximal runs of a code array."""
    starts = np.concatenate(([0], np.flatnonzero(np.diff(codes)) + 1))
    lengths = np.diff(np.concatenate((starts, [codes.size])))
    return codes[starts], lengths


def _count_lengths(lengths: np.ndarray) -> Dict[int, int]:
    values, counts = np.unique(lengths, return_counts=True)
    return {int(q): int(c) for q, c in zip(values, counts)}


def run_histogram(trajectory: Trajectory) -> RunHistogram:
    """
    Counts every maximal run of identical outcomes once, at its exact length.

    Runs cut by the start or end of the record are counted as observed.
    """
    codes = trajectory.codes
    if codes.size == 0:
        raise EmptyTrajectory("trajectory holds no outcomes")
    symbols, lengths = _runs(codes)
    if lengths.max() > CENSORING_FRACTION * codes.size:
        logger.warning(
            f"Longest run ({int(lengths.max())}) exceeds N/10 for N={codes.size}; boundary-censored runs bias the statistics"
        )
    return RunHistogram(
        on_runs=_count_lengths(lengths[symbols == 0]),
        off_runs=_count_lengths(lengths[symbols == 1]),
        total_measurements=int(codes.size),
    )


def pooled_histogram(trajectories: Iterable[Trajectory]) -> RunHistogram:
    return reduce(RunHistogram.merge, (run_histogram(t) for t in trajectories), RunHistogram())


def normalized_sequence_prob(
    hist: RunHistogram,
    species: MeasurementOutcome,
    cumulative: bool = True,
) -> Dict[int, float]:
    """
    U(q)/U(1) for q = 1..longest.

    With `cumulative` U(q) counts runs of length ≥ q and the ratio is non-increasing;
    otherwise it counts runs of exactly length q.
    """
    counts = hist.cumulative(species)
    if not counts or counts[1] == 0:
        raise NoRuns(f"no {species.name} runs in histogram")
    if not cumulative:
        exact = hist.runs(species)
        counts = {q: exact.get(q, 0) for q in counts}
        if counts[1] == 0:
            raise NoRuns(f"no {species.name} runs of length 1 to normalize by")
    first = counts[1]
    return {q: u / first for q, u in counts.items()}


def _geometric_fit(repeats: int, terminations: int) -> GeometricFit:
    trials = repeats + terminations
    if trials == 0:
        raise NoRuns("no trials to estimate a repeat probability from")
    p = repeats / trials
    # Fisher information of the geometric law: SE = (1 − p)·√(p/R) = √(p(1 − p)/trials)
    return GeometricFit(
        repeat_prob=p,
        standard_error=math.sqrt(p * (1.0 - p) / trials),
        terminated_runs=terminations,
        trials=trials,
    )


def geometric_mle(runs: Mapping[int, int], censored: int = 0) -> GeometricFit:
    """
    Maximum-likelihood repeat probability from run lengths, p̂ = 1 − R/ΣL.

    Args:
        runs (Mapping[int, int]): Run length → count.
        censored (int): How many of these runs were cut by the record end (no terminating change seen).

    Returns:
        GeometricFit: p̂ and its Fisher standard error.
    """
    total = sum(q * c for q, c in runs.items())
    count = sum(runs.values())
    if count == 0:
        raise NoRuns("no runs to fit")
    if not 0 <= censored <= count:
        raise InvalidParams(f"censored runs {censored} must lie in [0, {count}]")
    terminations = count - censored
    return _geometric_fit(total - terminations, terminations)


def chain_fit(trajectories: Sequence[Trajectory], species: MeasurementOutcome) -> GeometricFit:
    """
    Censored geometric MLE of the repeat probability from adjacent-pair counts.

    Every adjacent pair of outcomes inside a record is one trial.
    """
    target = 0 if species == MeasurementOutcome.ON else 1
    repeats = 0
    changes = 0
    for trajectory in trajectories:
        codes = trajectory.codes
        previous, following = codes[:-1], codes[1:]
        from_species = previous == target
        repeats += int(np.count_nonzero(from_species & (following == target)))
        changes += int(np.count_nonzero(from_species & (following != target)))
    return _geometric_fit(repeats, changes)


def _pool_tail(observed: List[float], expected: List[float]) -> Tuple[np.ndarray, np.ndarray]:
    pooled_obs: List[float] = []
    pooled_exp: List[float] = []
    acc_obs = 0.0
    acc_exp = 0.0
    for o, e in zip(reversed(observed), reversed(expected)):
        acc_obs += o
        acc_exp += e
        if acc_exp >= MIN_EXPECTED_COUNT:
            pooled_obs.append(acc_obs)
            pooled_exp.append(acc_exp)
            acc_obs = acc_exp = 0.0
    if acc_exp > 0.0 or acc_obs > 0.0:
        if pooled_obs:
            pooled_obs[-1] += acc_obs
            pooled_exp[-1] += acc_exp
        else:
            pooled_obs.append(acc_obs)
            pooled_exp.append(acc_exp)
    return np.array(pooled_obs[::-1]), np.array(pooled_exp[::-1])


def _goodness(runs: Mapping[int, int], survival: Sequence[float], fitted_parameters: int) -> GoodnessOfFit:
    """
    Pearson χ² of exact run lengths 1..Q plus an empty tail bin > Q against a survival
    law, survival[k] = P(L > k). Q is the longest observed run.
    """
    longest = max(q for q, c in runs.items() if c > 0)
    total = sum(runs.values())
    observed = [float(runs.get(q, 0)) for q in range(1, longest + 1)] + [0.0]
    probabilities = [survival[q - 1] - survival[q] for q in range(1, longest + 1)] + [survival[longest]]

    if any(p <= 0.0 and o > 0 for p, o in zip(probabilities, observed)):
        bins = len(observed)
        return GoodnessOfFit(statistic=math.inf, p_value=0.0, dof=max(bins - 1 - fitted_parameters, 1), bins=bins)

    obs, exp = _pool_tail(observed, [total * p for p in probabilities])
    if obs.size < 2:
        raise DegenerateHistogram("fewer than two bins remain after pooling to expected count >= 5")
    dof = max(obs.size - 1 - fitted_parameters, 1)
    statistic = float(np.sum((obs - exp) ** 2 / exp))
    return GoodnessOfFit(statistic=statistic, p_value=float(stats.chi2.sf(statistic, dof)), dof=dof, bins=int(obs.size))


def compare_models(
    hist: RunHistogram,
    rates: DerivedRates,
    species: MeasurementOutcome = MeasurementOutcome.ON,
    fitted_parameters: int = 0,
) -> ModelComparison:
    """
    Tests the observed run lengths against the collapse law V(q−1) = p^(q−1) and the
    coherent law V_coh(q−1) = cos²((q−1)Ωτ/2).

    A run that has reached zero coherent survival cannot continue, so the coherent
    survival is taken as its running minimum.

    Args:
        hist (RunHistogram): Observed runs.
        rates (DerivedRates): Source of p (per species) and Ωτ.
        species (MeasurementOutcome): Which runs to test.
        fitted_parameters (int): Parameters estimated from the same data, removed from the dof.

    Returns:
        ModelComparison: Pearson χ² and p-value for both laws.

    Raises:
        DegenerateHistogram: Fewer than two distinct run lengths, or fewer than two bins after pooling.
    """
    runs = {q: c for q, c in hist.runs(species).items() if c > 0}
    if len(runs) < 2:
        raise DegenerateHistogram(f"{species.name} runs have {len(runs)} distinct length(s); need at least 2")

    longest = max(runs)
    p = rates.repeat_prob_on if species == MeasurementOutcome.ON else rates.repeat_prob_off
    collapse = [survival_probability(p, q) for q in range(longest + 1)]
    coherent = np.minimum.accumulate([coherent_survival(rates.omega_tau * rates.pulses_per_block, q) for q in range(longest + 1)])

    return ModelComparison(
        species=species,
        collapse=_goodness(runs, collapse, fitted_parameters),
        coherent=_goodness(runs, list(coherent), 0),
    )


def compare_histograms(
    first: RunHistogram,
    second: RunHistogram,
    species: MeasurementOutcome = MeasurementOutcome.ON,
) -> GoodnessOfFit:
    """Two-sample χ² homogeneity test of exact run-length distributions, tail-pooled."""
    longest = max(first.longest(species), second.longest(species))
    if longest < 2:
        raise DegenerateHistogram("both histograms hold only runs of length 1")
    table = np.array(
        [[h.runs(species).get(q, 0) for q in range(1, longest + 1)] for h in (first, second)],
        dtype=float,
    )
    row_share = table.sum(axis=1) / table.sum()
    if row_share.min() == 0.0:
        raise DegenerateHistogram(f"one histogram holds no {species.name} runs")

    columns: List[np.ndarray] = []
    acc = np.zeros(2)
    for column in table.T[::-1]:
        acc = acc + column
        if acc.sum() * row_share.min() >= MIN_EXPECTED_COUNT:
            columns.append(acc)
            acc = np.zeros(2)
    if acc.sum() > 0:
        if columns:
            columns[-1] = columns[-1] + acc
        else:
            columns.append(acc)
    if len(columns) < 2:
        raise DegenerateHistogram("fewer than two bins remain after pooling")

    pooled = np.array(columns[::-1]).T
    statistic, p_value, dof, _ = stats.chi2_contingency(pooled, correction=False)
    return GoodnessOfFit(statistic=float(statistic), p_value=float(p_value), dof=int(dof), bins=len(columns))


def _pair_counts(codes: np.ndarray) -> Tuple[int, int]:
    previous, following = codes[:-1], codes[1:]
    ground = previous == 0
    return int(np.count_nonzero(ground)), int(np.count_nonzero(ground & (following == 1)))


def _excitation(ground: int, excitations: int) -> ExcitationEstimate:
    if ground == 0:
        raise NoGroundOccurrences("no On outcome is followed by another probe")
    p = excitations / ground
    return ExcitationEstimate(
        probability=p,
        standard_error=math.sqrt(p * (1.0 - p) / ground),
        ground_occurrences=ground,
        excitations=excitations,
    )


def excitation_probability(trajectory: Trajectory) -> ExcitationEstimate:
    """Fraction of On outcomes (last position excluded) followed by Off, with binomial error."""
    codes = trajectory.codes
    if codes.size < 2:
        raise InsufficientData("need at least two outcomes to form a pair")
    return _excitation(*_pair_counts(codes))


def pooled_excitation_probability(trajectories: Iterable[Trajectory]) -> ExcitationEstimate:
    ground = excitations = 0
    for trajectory in trajectories:
        if len(trajectory) < 2:
            continue
        g, e = _pair_counts(trajectory.codes)
        ground += g
        excitations += e
    return _excitation(ground, excitations)


def markov_order_test(trajectory: Trajectory) -> GoodnessOfFit:
    """
    χ² test that the next outcome depends on the last one only.

    For each value of the last outcome, a 2×2 table of (outcome before it) × (next
    outcome) is tested for independence; statistics and dof are summed.
    """
    codes = trajectory.codes
    if codes.size < 3:
        raise InsufficientData("need at least three outcomes for a second-order test")
    before, last, following = codes[:-2], codes[1:-1], codes[2:]

    statistic = 0.0
    dof = 0
    for state in (0, 1):
        mask = last == state
        table = np.array(
            [[np.count_nonzero(mask & (before == i) & (following == j)) for j in (0, 1)] for i in (0, 1)],
            dtype=float,
        )
        if (table.sum(axis=0) == 0).any() or (table.sum(axis=1) == 0).any():
            continue
        chi2_value, _, table_dof, _ = stats.chi2_contingency(table, correction=False)
        statistic += float(chi2_value)
        dof += int(table_dof)

    if dof == 0:
        return GoodnessOfFit(statistic=0.0, p_value=1.0, dof=0, bins=0)
    return GoodnessOfFit(statistic=statistic, p_value=float(stats.chi2.sf(statistic, dof)), dof=dof, bins=4 * dof)


def invert_relaxation(p: float, branching: float, weight: float, theta: float) -> float:
    """
    Solves p = 1 − f·B·(1 − e^{−(a+b)}cos θ) for a+b at known θ.

    Raises:
        NonInvertible: If f·B = 0, cos θ = 0 or the implied damping factor is not positive.
    """
    scale = branching * weight
    if scale <= 0.0:
        raise NonInvertible("f*B is zero; the repeat probability carries no relaxation information")
    cosine = math.cos(theta)
    if abs(cosine) < 1e-12:
        raise NonInvertible("cos(theta) vanishes; a+b cannot be separated from the phase")
    damping = (1.0 - (1.0 - p) / scale) / cosine
    if damping <= 0.0:
        raise NonInvertible(f"implied damping factor {damping:.6g} is not positive")
    return -math.log(damping)


def _phase_cosine(p: float, branching: float, weight: float, relaxation: float) -> float:
    scale = branching * weight
    if scale <= 0.0:
        raise NonInvertible("f*B is zero; the repeat probability carries no phase information")
    return (1.0 - (1.0 - p) / scale) * math.exp(relaxation)


def invert_phase(
    p: float,
    branching: float,
    weight: float,
    relaxation: float,
    seed_phase: float,
    cosine_error: float = 0.0,
) -> PhaseInversion:
    """
    Solves p = 1 − f·B·(1 − e^{−(a+b)}cos θ′) for θ′ ∈ [0, 2π).

    cos θ′ has two roots; the one on the same side of π as `seed_phase` is returned
    (the branch where dp/dθ′ has the sign it has at the seed). A cosine beyond ±1 is
    clipped when within 3·cosine_error of the boundary.

    Raises:
        NonInvertible: If the implied cosine lies outside [−1, 1] beyond tolerance.
    """
    cosine = _phase_cosine(p, branching, weight, relaxation)
    clipped = False
    if abs(cosine) > 1.0:
        if abs(cosine) - 1.0 > AMBIGUITY_SIGMAS * cosine_error + 1e-12:
            raise NonInvertible(f"implied cos(theta') = {cosine:.6g} lies outside [-1, 1]")
        cosine = math.copysign(1.0, cosine)
        clipped = True
    principal = math.acos(cosine)
    mirrored = (TWO_PI - principal) % TWO_PI
    if math.sin(seed_phase % TWO_PI) >= 0.0:
        return PhaseInversion(phase=principal, alternate_phase=mirrored, clipped=clipped)
    return PhaseInversion(phase=mirrored, alternate_phase=principal, clipped=clipped)


def _shared_params(trajectories: Sequence[Trajectory]):
    params = trajectories[0].params
    if any(t.params != params for t in trajectories[1:]):
        raise InvalidParams("phase trajectories must share one parameter set")
    return params


def fit_parameters(
    ensemble: Union[EnsembleResult, Sequence[Trajectory]],
    calibration_relaxation: Optional[float] = None,
) -> FitReport:
    """
    Fits a+b, θ′ and f₁ from an ensemble.

    The first trajectory calibrates a+b from its On runs at the model phase of its
    own params. The remaining trajectories, which must share one params set, give
    θ′ from their On runs and f₁ from their Off runs. Standard errors come from the
    geometric Fisher information, propagated by the delta method.

    Args:
        ensemble (EnsembleResult | Sequence[Trajectory]): At least two trajectories.
        calibration_relaxation (Optional[float]): Known a+b; skips the calibration step.

    Returns:
        FitReport: Fitted values, errors and the collapse-law goodness of fit.

    Raises:
        InsufficientData: Fewer than two trajectories.
        NonInvertible: The closed form has no solution for the observed repeat probabilities.
    """
    trajectories = list(ensemble.trajectories if isinstance(ensemble, EnsembleResult) else ensemble)
    if len(trajectories) < 2:
        raise InsufficientData(f"need at least 2 trajectories, got {len(trajectories)}")

    calibration = trajectories[0]
    rest = trajectories[1:]
    cal_params = calibration.params
    cal_rates = block_rates(cal_params, cal_params.pulses_per_measurement)
    cal_fit = chain_fit([calibration], MeasurementOutcome.ON)

    if calibration_relaxation is None:
        relaxation, relaxation_error = delta_method(
            lambda p: invert_relaxation(p, cal_params.ground_branching_factor, cal_rates.coherent_weight_ground, cal_rates.nutation_phase_total),
            [cal_fit.repeat_prob],
            [cal_fit.standard_error],
        )
    else:
        relaxation, relaxation_error = calibration_relaxation, 0.0

    params = _shared_params(rest)
    rates = block_rates(params, params.pulses_per_measurement)
    on_fit = chain_fit(rest, MeasurementOutcome.ON)
    off_fit = chain_fit(rest, MeasurementOutcome.OFF)
    f0 = params.ground_branching_factor
    b0 = rates.coherent_weight_ground

    _, cosine_error = delta_method(
        lambda p, r: _phase_cosine(p, f0, b0, r),
        [on_fit.repeat_prob, relaxation],
        [on_fit.standard_error, relaxation_error],
    )
    inversion = invert_phase(on_fit.repeat_prob, f0, b0, relaxation, rates.fractional_phase, cosine_error)

    def _phase(p: float, r: float) -> float:
        # finite-difference probes may step past |cos| = 1
        return invert_phase(p, f0, b0, r, inversion.phase, math.inf).phase

    _, phase_error = delta_method(_phase, [on_fit.repeat_prob, relaxation], [on_fit.standard_error, relaxation_error])
    if not math.isfinite(phase_error):
        phase_error = math.pi
    separation = abs(inversion.phase - inversion.alternate_phase)
    ambiguous = min(separation, TWO_PI - separation) < AMBIGUITY_SIGMAS * phase_error
    if ambiguous:
        logger.warning(
            f"Phase branch ambiguous: θ′={inversion.phase:.6g} and {inversion.alternate_phase:.6g} lie within 3σ ({phase_error:.3g})"
        )

    if on_fit.repeat_prob >= 1.0:
        raise NonInvertible("no On run ever ended; f1 cannot be separated")
    b1 = rates.coherent_weight_metastable
    if b1 <= 0.0:
        raise NonInvertible("B1 is zero; f1 cannot be fitted")
    mixing, mixing_error = delta_method(
        lambda p0, p1: (1.0 - p1) * f0 * b0 / ((1.0 - p0) * b1),
        [on_fit.repeat_prob, off_fit.repeat_prob],
        [on_fit.standard_error, off_fit.standard_error],
    )

    fitted_rates = rates.model_copy(update={"repeat_prob_on": on_fit.repeat_prob})
    try:
        goodness = compare_models(pooled_histogram(rest), fitted_rates, MeasurementOutcome.ON, fitted_parameters=1).collapse
    except DegenerateHistogram as e:
        logger.info(f"Goodness of fit skipped: {e}")
        goodness = GoodnessOfFit(statistic=0.0, p_value=1.0, dof=0, bins=1)

    logger.info(f"Fit: a+b={relaxation:.6g}±{relaxation_error:.3g}, θ′={inversion.phase:.6g}±{phase_error:.3g}, f1={mixing:.6g}±{mixing_error:.3g}")
    return FitReport(
        total_relaxation=relaxation,
        total_relaxation_error=relaxation_error,
        fractional_phase=inversion.phase,
        fractional_phase_error=phase_error,
        alternate_phase=inversion.alternate_phase,
        phase_ambiguous=ambiguous,
        mixing_factor=mixing,
        mixing_factor_error=mixing_error,
        calibration_repeat_prob=cal_fit,
        repeat_prob_on=on_fit,
        repeat_prob_off=off_fit,
        goodness_of_fit=goodness,
        trajectories=len(trajectories),
    )
