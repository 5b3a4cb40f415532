# src/core/protocol.py

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field

from src.core.errors import DegenerateDamping, DuplicateN, ImaginaryNutation, InsufficientData, InvalidParams, OutOfBranch
from src.core.model import TWO_PI, ExperimentParams
from src.core.propagation import delta_method, monte_carlo
from src.core.statistics import FitReport, fit_parameters
from src.core.trajectory import SimMode, derive_seed, make_rng, simulate_ensemble, simulate_trajectory

logger = logging.getLogger(__name__)

# Second-order expansion of the exact block phase gives 1/(2Ωτ); the printed form carries 1/(Ωτ).
PRINTED_LEADING_FACTOR = 1.0
EXACT_LEADING_FACTOR = 0.5


class ErrorModel(str, Enum):
    PROPAGATED = "propagated"    # first-order delta method
    MAXIMUM = "maximum"          # linear worst-case accounting in phase units
    MONTE_CARLO = "monte_carlo"  # Gaussian resampling of the phases


class ProtocolPoint(BaseModel):
    """Measured per-block fractional phase θ′_n ∈ [0, 2πn) with θ_n = 2πns + θ′_n."""
    n: int = Field(ge=1)
    theta_prime: float = Field(ge=0.0)
    theta_prime_error: float = Field(0.0, ge=0.0)
    s: int = Field(0, ge=0)
    b_n: Optional[float] = None

    @property
    def per_pulse_phase(self) -> float:
        return self.theta_prime / self.n + TWO_PI * self.s


class HeterodyneDelta(BaseModel):
    m: int
    n: int
    value: float
    standard_error: float = Field(ge=0.0)


class ErrorBudget(BaseModel):
    delta_error: float
    ratio_error: float
    delta_b_error: float


class DeltaBEstimate(BaseModel):
    delta_b: float
    standard_error: float = Field(ge=0.0)
    m: int
    n: int = 1
    delta_21: float
    delta_21_error: float = Field(0.0, ge=0.0)
    delta_m1: float
    delta_m1_error: float = Field(0.0, ge=0.0)
    a_minus_b1: float
    a_minus_b1_error: float = Field(0.0, ge=0.0)
    ratio: float
    ratio_error: float = Field(0.0, ge=0.0)
    error_model: ErrorModel = ErrorModel.PROPAGATED
    points: List[ProtocolPoint] = Field(default_factory=list)


def nutation_phase_n(omega_tau: float, a: float, b_n: float, n: int) -> Tuple[float, int, float]:
    """
    Block nutation angle θ_n = √(n²(Ωτ)² − (a−b_n)²) = 2πns + θ′_n.

    Returns:
        Tuple[float, int, float]: θ_n, the per-pulse turn count s and θ′_n ∈ [0, 2πn).
    """
    if n < 1:
        raise InvalidParams(f"n must be >= 1, got {n}")
    squared = (n * omega_tau) ** 2 - (a - b_n) ** 2
    if squared < 0.0:
        raise ImaginaryNutation(f"n^2(Omega*tau)^2 = {(n * omega_tau) ** 2:.6g} < (a-b_n)^2 = {(a - b_n) ** 2:.6g}")
    theta = math.sqrt(squared)
    s = int(math.floor(theta / (TWO_PI * n)))
    theta_prime = theta - TWO_PI * n * s
    if theta_prime >= TWO_PI * n:
        s += 1
        theta_prime -= TWO_PI * n
    return theta, s, theta_prime


def heterodyne_delta(point_m: ProtocolPoint, point_n: ProtocolPoint) -> HeterodyneDelta:
    """δ_mn = θ′_m/m − θ′_n/n (plus 2π(s_m − s_n) when the turn counts differ)."""
    if point_m.n == point_n.n:
        raise DuplicateN(f"both points use n={point_m.n}")
    value = point_m.per_pulse_phase - point_n.per_pulse_phase
    error = math.hypot(point_m.theta_prime_error / point_m.n, point_n.theta_prime_error / point_n.n)
    return HeterodyneDelta(m=point_m.n, n=point_n.n, value=value, standard_error=error)


def model_delta(
    omega_tau: float,
    a: float,
    b_n: float,
    delta_b: float,
    m: float,
    n: int,
    leading_factor: float = PRINTED_LEADING_FACTOR,
) -> float:
    """
    δ_mn = (c/Ωτ)·((a−b_n)/n)²·[1 − (n/m)²(1 + δb/(a−b_n))²] with δb = b_n − b_m.

    c = 1 evaluates the printed expression; c = 1/2 is the second-order expansion of
    the exact block phase. m may be math.inf.
    """
    if not omega_tau > 0.0:
        raise InvalidParams(f"omega_tau must be > 0, got {omega_tau}")
    if n < 1 or not m >= 1:
        raise InvalidParams(f"m and n must be >= 1, got m={m}, n={n}")
    damping = a - b_n
    if damping == 0.0 and delta_b != 0.0:
        raise DegenerateDamping("a equals b_n, so delta_b/(a-b_n) is undefined")
    if damping == 0.0:
        return 0.0
    ratio = 0.0 if math.isinf(m) else (n / m) ** 2
    return leading_factor / omega_tau * (damping / n) ** 2 * (1.0 - ratio * (1.0 + delta_b / damping) ** 2)


def linearized_slope(a_minus_b1: float) -> float:
    """d(δ₂₁/δ_m1)/dδb at δb = 0; −10/4 at a−b₁ = 0.2."""
    if a_minus_b1 == 0.0:
        raise DegenerateDamping("a - b1 is zero")
    return -1.0 / (2.0 * a_minus_b1)


def _delta_b_from_ratio(ratio: float, a_minus_b1: float) -> float:
    radicand = 1.0 - ratio
    if radicand < 0.0:
        raise OutOfBranch(f"1 - delta_21/delta_m1 = {radicand:.6g} < 0")
    return a_minus_b1 * (2.0 * math.sqrt(radicand) - 1.0)


def invert_ratio(ratio: float, a_minus_b1: float, ratio_error: float = 0.0, a_minus_b1_error: float = 0.0) -> Tuple[float, float]:
    """δb = (a−b₁)(2√(1 − r) − 1) for r = δ₂₁/δ_m1, with first-order error."""
    if not a_minus_b1 > 0.0:
        raise InvalidParams(f"a - b1 must be > 0, got {a_minus_b1}")
    value = _delta_b_from_ratio(ratio, a_minus_b1)
    radicand = 1.0 - ratio
    if radicand == 0.0:
        return value, math.inf if ratio_error > 0.0 else 0.0
    d_ratio = -a_minus_b1 / math.sqrt(radicand)
    d_scale = 2.0 * math.sqrt(radicand) - 1.0
    return value, math.hypot(d_ratio * ratio_error, d_scale * a_minus_b1_error)


def maximum_error_budget(sigma_theta_prime: float, a_minus_b1: float, ratio: float = 0.75) -> ErrorBudget:
    """
    Worst-case accounting: each δ carries 2σ_θ′, the ratio 4σ_θ′ (phase units),
    and δb the ratio error times |dδb/dr|. σ_θ′ = 10⁻⁴ at a−b₁ = 0.2 gives 1.6×10⁻⁴.
    """
    if sigma_theta_prime < 0.0:
        raise InvalidParams(f"sigma must be >= 0, got {sigma_theta_prime}")
    if ratio >= 1.0:
        raise OutOfBranch(f"ratio {ratio} leaves no real branch")
    ratio_error = 4.0 * sigma_theta_prime
    return ErrorBudget(
        delta_error=2.0 * sigma_theta_prime,
        ratio_error=ratio_error,
        delta_b_error=a_minus_b1 / math.sqrt(1.0 - ratio) * ratio_error,
    )


def a_minus_b_from_delta(
    delta_m1: float,
    omega_tau: float,
    m: float = math.inf,
    leading_factor: float = EXACT_LEADING_FACTOR,
) -> float:
    """a − b₁ = √(Ωτ·δ_∞1/c), with δ_∞1 = δ_m1/(1 − 1/m²) at b_m = b₁."""
    if not omega_tau > 0.0:
        raise InvalidParams(f"omega_tau must be > 0, got {omega_tau}")
    if delta_m1 <= 0.0:
        raise InvalidParams(f"delta_m1 must be > 0 to fix a - b1, got {delta_m1}")
    infinite = delta_m1 if math.isinf(m) else delta_m1 / (1.0 - 1.0 / m ** 2)
    return math.sqrt(omega_tau * infinite / leading_factor)


def estimate_delta_b(
    delta_21: float,
    delta_m1: float,
    a_minus_b1: float,
    delta_21_error: float = 0.0,
    delta_m1_error: float = 0.0,
    a_minus_b1_error: float = 0.0,
    covariance_21_m1: float = 0.0,
    m: float = math.inf,
) -> DeltaBEstimate:
    """
    Inverts δ₂₁/δ_m1 = 1 − ¼(1 + δb/(a−b₁))² for δb.

    Args:
        delta_21 (float): Measured δ₂₁.
        delta_m1 (float): Measured δ_m1; corrected to m → ∞ when m is finite.
        a_minus_b1 (float): a − b₁ > 0.
        delta_21_error (float): σ(δ₂₁).
        delta_m1_error (float): σ(δ_m1).
        a_minus_b1_error (float): σ(a − b₁), taken as independent.
        covariance_21_m1 (float): Cov(δ₂₁, δ_m1); both share θ′₁.
        m (float): Pulses per probe of the reference point.

    Returns:
        DeltaBEstimate: δb with first-order error.

    Raises:
        OutOfBranch: If 1 − δ₂₁/δ_m1 < 0.
    """
    if delta_m1 == 0.0:
        raise InvalidParams("delta_m1 is zero")
    if not a_minus_b1 > 0.0:
        raise InvalidParams(f"a - b1 must be > 0, got {a_minus_b1}")
    correction = 1.0 if math.isinf(m) else 1.0 - 1.0 / m ** 2

    def _delta_b(d21: float, dm1: float, x: float) -> float:
        return _delta_b_from_ratio(d21 / (dm1 / correction), x)

    ratio = delta_21 / (delta_m1 / correction)
    value = _delta_b(delta_21, delta_m1, a_minus_b1)
    covariance = np.array(
        [
            [delta_21_error ** 2, covariance_21_m1, 0.0],
            [covariance_21_m1, delta_m1_error ** 2, 0.0],
            [0.0, 0.0, a_minus_b1_error ** 2],
        ]
    )
    _, error = delta_method(_delta_b, [delta_21, delta_m1, a_minus_b1], covariance)
    _, ratio_error = delta_method(lambda d21, dm1: d21 / (dm1 / correction), [delta_21, delta_m1], covariance[:2, :2])
    return DeltaBEstimate(
        delta_b=value,
        standard_error=error,
        m=int(m) if math.isfinite(m) else 0,
        delta_21=delta_21,
        delta_21_error=delta_21_error,
        delta_m1=delta_m1,
        delta_m1_error=delta_m1_error,
        a_minus_b1=a_minus_b1,
        a_minus_b1_error=a_minus_b1_error,
        ratio=ratio,
        ratio_error=ratio_error,
    )


def unwrap_phase(theta_prime_fit: float, reference_theta: float, n: int, sigma: float = 0.0) -> ProtocolPoint:
    """
    Restores the block angle from a fitted θ′ ∈ [0, 2π) and a trusted reference θ_n
    (from the known Ωτ), then splits it as 2πns + θ′_n.
    """
    if n < 1:
        raise InvalidParams(f"n must be >= 1, got {n}")
    turns = round((reference_theta - theta_prime_fit) / TWO_PI)
    theta = TWO_PI * turns + theta_prime_fit
    if theta < 0.0:
        raise InvalidParams(f"unwrapped angle {theta:.6g} is negative")
    s = int(math.floor(theta / (TWO_PI * n)))
    return ProtocolPoint(n=n, theta_prime=theta - TWO_PI * n * s, theta_prime_error=sigma, s=s)


def ideal_zeno_survival(total_angle: float, n: int) -> float:
    """cos^{2N}(ΩT/2N): no-transition probability under N equally spaced projections."""
    if n < 1:
        raise InvalidParams(f"N must be >= 1, got {n}")
    return math.cos(total_angle / (2.0 * n)) ** (2 * n)


def _reference_points(points: Sequence[ProtocolPoint]) -> Tuple[ProtocolPoint, ProtocolPoint, ProtocolPoint]:
    by_n: Dict[int, ProtocolPoint] = {}
    for point in points:
        if point.n in by_n:
            raise DuplicateN(f"n={point.n} supplied twice")
        by_n[point.n] = point
    if 1 not in by_n or 2 not in by_n:
        raise InsufficientData("the protocol needs points at n=1 and n=2")
    others = [n for n in by_n if n > 2]
    if not others:
        raise InsufficientData("the protocol needs a reference point with m > 2")
    return by_n[1], by_n[2], by_n[max(others)]


def delta_b_from_points(
    points: Sequence[ProtocolPoint],
    omega_tau: float,
    a_minus_b1: Optional[float] = None,
    a_minus_b1_error: float = 0.0,
    error_model: ErrorModel = ErrorModel.PROPAGATED,
    leading_factor: float = EXACT_LEADING_FACTOR,
    rng: Optional[np.random.Generator] = None,
) -> DeltaBEstimate:
    """
    Full protocol from measured phases at n = 1, 2 and the largest m.

    When a − b₁ is not supplied it is read off δ_m1, and the δb error then follows
    from the three phases alone.
    """
    p1, p2, pm = _reference_points(points)
    m = pm.n
    d21 = heterodyne_delta(p2, p1)
    dm1 = heterodyne_delta(pm, p1)
    correction = 1.0 - 1.0 / m ** 2

    def _deltas(t1: float, t2: float, tm: float) -> Tuple[float, float]:
        phase_1 = t1 + TWO_PI * p1.s
        return t2 / 2.0 + TWO_PI * p2.s - phase_1, tm / m + TWO_PI * pm.s - phase_1

    def _ratio(t1: float, t2: float, tm: float) -> float:
        delta_21, delta_m1 = _deltas(t1, t2, tm)
        return delta_21 / (delta_m1 / correction)

    def _scale(t1: float, t2: float, tm: float) -> float:
        return a_minus_b_from_delta(_deltas(t1, t2, tm)[1], omega_tau, m, leading_factor)

    def _delta_b(t1: float, t2: float, tm: float, x: Optional[float] = None) -> float:
        return _delta_b_from_ratio(_ratio(t1, t2, tm), _scale(t1, t2, tm) if x is None else x)

    phases = [p1.theta_prime, p2.theta_prime, pm.theta_prime]
    sigmas = [p1.theta_prime_error, p2.theta_prime_error, pm.theta_prime_error]
    if a_minus_b1 is None:
        x, x_error = delta_method(_scale, phases, sigmas)
        values, errors = phases, sigmas
    else:
        x, x_error = a_minus_b1, a_minus_b1_error
        values, errors = phases + [a_minus_b1], sigmas + [a_minus_b1_error]

    ratio, ratio_error = delta_method(_ratio, phases, sigmas)
    value = _delta_b(*values)
    if error_model == ErrorModel.MAXIMUM:
        budget = maximum_error_budget(max(sigmas), x, ratio)
        ratio_error, error = budget.ratio_error, budget.delta_b_error
    elif error_model == ErrorModel.MONTE_CARLO:
        _, error = monte_carlo(_delta_b, values, errors, rng if rng is not None else make_rng(0))
    else:
        _, error = delta_method(_delta_b, values, errors)

    logger.info(f"δb={value:.6g}±{error:.3g} from δ21={d21.value:.6g}, δm1={dm1.value:.6g} (m={m}, {error_model.value})")
    return DeltaBEstimate(
        delta_b=value,
        standard_error=error,
        m=m,
        delta_21=d21.value,
        delta_21_error=d21.standard_error,
        delta_m1=dm1.value,
        delta_m1_error=dm1.standard_error,
        a_minus_b1=x,
        a_minus_b1_error=x_error,
        ratio=ratio,
        ratio_error=ratio_error,
        error_model=error_model,
        points=[p1, p2, pm],
    )


def calibration_params(params: ExperimentParams, a: float, b_n: float) -> ExperimentParams:
    """Retunes Ω so the block angle sits on a spectral dip, θ_n = 2πK; a and b do not depend on Ω."""
    n = params.pulses_per_measurement
    turns = max(1, round(n * params.omega_tau / TWO_PI))
    omega_tau = math.sqrt((TWO_PI * turns) ** 2 + (a - b_n) ** 2) / n
    return params.model_copy(update={"rabi_frequency": omega_tau / params.drive_duration})


def _simulate_point(
    base: ExperimentParams,
    a: float,
    b_n: float,
    b_1: float,
    n: int,
    trajectories: int,
    seed: int,
) -> Tuple[ProtocolPoint, FitReport]:
    params = ExperimentParams.from_relaxation(
        base.rabi_frequency,
        base.drive_duration,
        a,
        b_n,
        ground_branching_factor=base.ground_branching_factor,
        metastable_mixing_factor=base.metastable_mixing_factor,
        measurements_per_trajectory=base.measurements_per_trajectory,
        pulses_per_measurement=n,
    )
    calibration = simulate_trajectory(calibration_params(params, a, b_n), SimMode.ANALYTIC_MARKOV, derive_seed(seed, 0))
    ensemble = simulate_ensemble(params, SimMode.ANALYTIC_MARKOV, trajectories, derive_seed(seed, 1))
    report = fit_parameters([calibration] + list(ensemble.trajectories))
    reference, _, _ = nutation_phase_n(base.omega_tau, a, b_1, n)
    point = unwrap_phase(report.fractional_phase, reference, n, report.fractional_phase_error)
    return point.model_copy(update={"b_n": b_n}), report


def end_to_end_recovery(
    base: ExperimentParams,
    a: float,
    b_1: float,
    b_2: float,
    b_m: float,
    m: int,
    trajectories_per_point: int,
    master_seed: int,
    error_model: ErrorModel = ErrorModel.PROPAGATED,
    threads: int = 1,
) -> DeltaBEstimate:
    """
    Simulates the three-rate protocol and recovers δb = b₁ − b₂.

    At each n ∈ {1, 2, m} a calibration trajectory at a spectral dip fixes a+b_n,
    then `trajectories_per_point` Markov trajectories at the base Ωτ give θ′_n. The
    phases go through delta_b_from_points with the exact leading factor.

    Args:
        base (ExperimentParams): Supplies Ω, τ, f₀, f₁ and N; its rates are replaced.
        a (float): Dimensionless a, shared by all points.
        b_1 (float): b at n = 1.
        b_2 (float): b at n = 2.
        b_m (float): b at n = m.
        m (int): Pulses per probe of the reference point, m > 2.
        trajectories_per_point (int): Phase trajectories per n.
        master_seed (int): Root of every per-point seed.
        error_model (ErrorModel): Propagated or Monte Carlo errors.
        threads (int): Worker count; never changes the result.

    Returns:
        DeltaBEstimate: Recovered δb and its simulation-derived error.

    Raises:
        DuplicateN: If m repeats n = 1 or n = 2.
    """
    if m in (1, 2):
        raise DuplicateN(f"m={m} coincides with one of the n=1, n=2 points")
    if m < 1:
        raise InvalidParams(f"m must be > 2, got {m}")
    if trajectories_per_point < 1:
        raise InvalidParams("need at least one phase trajectory per point")
    if error_model == ErrorModel.MAXIMUM:
        raise InvalidParams("end-to-end recovery reports propagated or Monte Carlo errors")

    profile = [(1, b_1), (2, b_2), (m, b_m)]
    logger.info(f"End-to-end protocol at n=1, 2, {m} with {trajectories_per_point} trajectories per point")

    def _run(index: int) -> Tuple[ProtocolPoint, FitReport]:
        n, b_n = profile[index]
        return _simulate_point(base, a, b_n, b_1, n, trajectories_per_point, derive_seed(master_seed, index))

    if threads <= 1:
        results = [_run(i) for i in range(len(profile))]
    else:
        with ThreadPoolExecutor(max_workers=min(threads, len(profile))) as executor:
            results = list(executor.map(_run, range(len(profile))))

    return delta_b_from_points(
        [point for point, _ in results],
        base.omega_tau,
        error_model=error_model,
        leading_factor=EXACT_LEADING_FACTOR,
        rng=make_rng(derive_seed(master_seed, len(profile))),
    )
