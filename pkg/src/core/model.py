# src/core/model.py

import logging
import math
from enum import Enum
from typing import List

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.core.errors import DimensionMismatch, ImaginaryNutation, InvalidParams, NotUnitary

logger = logging.getLogger(__name__)

TWO_PI = 2.0 * math.pi

# The closed form is asymptotic in θ ≫ π; below this the rates are still
# computed but flagged.
CLOSED_FORM_MIN_THETA = 4.0 * math.pi

DEFAULT_REGIME_THRESHOLD = 0.1
UNITARITY_TOLERANCE = 1e-10
MAX_QND_DIMENSION = 16


class MeasurementOutcome(str, Enum):
    """Probe result. The value is the on-disk character."""
    ON = "0"   # ground state, probe light scattered
    OFF = "1"  # metastable state, dark


class ExperimentParams(BaseModel):
    """
    Physical knobs of one drive/probe experiment, SI units (angular frequencies in rad/s).
    """
    model_config = ConfigDict(frozen=True, allow_inf_nan=False)

    rabi_frequency: float = Field(ge=0.0)
    detuning: float = 0.0
    drive_duration: float = Field(gt=0.0)
    inversion_decay_rate: float = Field(0.0, ge=0.0)
    drive_phase_diffusion_rate: float = Field(0.0, ge=0.0)
    probe_duration: float = Field(0.01, ge=0.0)  # bookkeeping only, the probe is a projection
    ground_branching_factor: float = Field(0.5, gt=0.0, le=1.0)
    metastable_mixing_factor: float = Field(1.0, gt=0.0, le=1.0)
    measurements_per_trajectory: int = Field(500, ge=1)
    pulses_per_measurement: int = Field(1, ge=1)

    @property
    def omega_tau(self) -> float:
        return self.rabi_frequency * self.drive_duration

    @classmethod
    def from_relaxation(cls, rabi_frequency: float, drive_duration: float, a: float, b: float, **kwargs) -> "ExperimentParams":
        """
        Builds params from the dimensionless relaxation pair instead of rates.

        Args:
            rabi_frequency (float): Ω in rad/s.
            drive_duration (float): τ in s.
            a (float): 2a = γ_ph·τ + (Γ/2)·τ.
            b (float): 2b = Γ·τ.
            **kwargs: Any other ExperimentParams field.

        Returns:
            ExperimentParams: Params with Γ = 2b/τ and γ_ph = (2a − b)/τ.
        """
        return cls(
            rabi_frequency=rabi_frequency,
            drive_duration=drive_duration,
            inversion_decay_rate=2.0 * b / drive_duration,
            drive_phase_diffusion_rate=(2.0 * a - b) / drive_duration,
            **kwargs,
        )


class Trajectory(BaseModel):
    """Every probe outcome of one ion record, stored as its '0'/'1' string, plus provenance."""
    model_config = ConfigDict(frozen=True)

    outcomes: str = Field(pattern=r"^[01]*$")
    seed: int = Field(0, ge=0)
    params: ExperimentParams

    @model_validator(mode="after")
    def _length_matches(self) -> "Trajectory":
        if len(self.outcomes) != self.params.measurements_per_trajectory:
            raise ValueError(
                f"trajectory holds {len(self.outcomes)} outcomes, params expect {self.params.measurements_per_trajectory}"
            )
        return self

    def __len__(self) -> int:
        return len(self.outcomes)

    @property
    def codes(self) -> np.ndarray:
        """Outcomes as an int8 array, 0 = On, 1 = Off."""
        return np.frombuffer(self.outcomes.encode("ascii"), dtype=np.uint8).astype(np.int8) - ord("0")

    def outcome_list(self) -> List[MeasurementOutcome]:
        return [MeasurementOutcome(c) for c in self.outcomes]


class DerivedRates(BaseModel):
    """Dimensionless relaxation pair, nutation angle and repeat probabilities of one probe cycle."""
    model_config = ConfigDict(frozen=True)

    a: float
    b: float
    transverse_rate: float
    omega_tau: float
    pulses_per_block: int = 1
    nutation_phase_total: float
    integer_turns: int
    fractional_phase: float
    coherent_weight_ground: float
    coherent_weight_metastable: float
    repeat_prob_on: float
    repeat_prob_off: float
    phase_diffusion_rate: float
    decay_rate: float
    valid_regime: bool

    @property
    def relaxation(self) -> float:
        """a + b, the exponent of the damping factor."""
        return self.a + self.b


class BlochState(BaseModel):
    """Bloch vector; w = +1 is the ground state (On), w = −1 the metastable state (Off)."""
    model_config = ConfigDict(frozen=True)

    u: float = 0.0
    v: float = 0.0
    w: float = 1.0

    @classmethod
    def ground(cls) -> "BlochState":
        return cls(u=0.0, v=0.0, w=1.0)

    @classmethod
    def metastable(cls) -> "BlochState":
        return cls(u=0.0, v=0.0, w=-1.0)

    @classmethod
    def from_array(cls, vector: np.ndarray) -> "BlochState":
        return cls(u=float(vector[0]), v=float(vector[1]), w=float(vector[2]))

    def as_array(self) -> np.ndarray:
        return np.array([self.u, self.v, self.w], dtype=float)

    @property
    def norm(self) -> float:
        return math.sqrt(self.u ** 2 + self.v ** 2 + self.w ** 2)

    @property
    def excitation_probability(self) -> float:
        return (1.0 - self.w) / 2.0


class RegimeReport(BaseModel):
    drive_ratio: float       # A·Ω_d/Ω_p, evaluated as printed
    probe_ratio: float       # Ω_p/A
    drive_to_probe: float    # Ω_d/Ω_p
    threshold: float
    in_regime: bool


def block_rates(params: ExperimentParams, pulses: int) -> DerivedRates:
    """
    Computes the repeat probabilities for a block of `pulses` drive pulses between probes.

    The nutation angle of the block follows θ_n² = n²(Ωτ)² − (a−b)²: the relaxation
    pair (a, b) enters once per block, not once per pulse.

    Args:
        params (ExperimentParams): The experiment.
        pulses (int): Number of drive pulses per probe, n ≥ 1.

    Returns:
        DerivedRates: a, b, θ, θ′, B₀, B₁, p₀, p₁ and their bookkeeping.

    Raises:
        InvalidParams: If pulses < 1.
        ImaginaryNutation: If n²(Ωτ)² < (a−b)².
    """
    if pulses < 1:
        raise InvalidParams(f"pulses per block must be >= 1, got {pulses}")

    tau = params.drive_duration
    decay = params.inversion_decay_rate
    dephasing = params.drive_phase_diffusion_rate
    omega = params.rabi_frequency

    transverse = dephasing + decay / 2.0
    a = transverse * tau / 2.0
    b = decay * tau / 2.0
    omega_tau = omega * tau

    theta_squared = (pulses * omega_tau) ** 2 - (a - b) ** 2
    if theta_squared < 0.0:
        logger.warning(f"Imaginary nutation: (n·Ωτ)²={(pulses * omega_tau) ** 2:.6g} < (a−b)²={(a - b) ** 2:.6g}")
        raise ImaginaryNutation(
            f"(n*Omega*tau)^2 = {(pulses * omega_tau) ** 2:.6g} is smaller than (a-b)^2 = {(a - b) ** 2:.6g}"
        )
    theta = math.sqrt(theta_squared)
    turns = int(math.floor(theta / TWO_PI))
    fractional = theta - TWO_PI * turns
    if fractional >= TWO_PI:  # floor round-off at exact multiples
        turns += 1
        fractional -= TWO_PI

    denominator = omega ** 2 + decay * transverse
    b0 = (omega ** 2 / 2.0) / denominator if denominator > 0.0 else 0.0
    b1 = 1.0 - b0

    contrast = 1.0 - math.exp(-(a + b)) * math.cos(theta)
    # asymptotic form; clamp to [0, 1]
    p0 = min(1.0, max(0.0, 1.0 - params.ground_branching_factor * b0 * contrast))
    p1 = min(1.0, max(0.0, 1.0 - params.metastable_mixing_factor * b1 * contrast))

    valid = theta >= CLOSED_FORM_MIN_THETA
    if not valid:
        logger.warning(f"θ={theta:.6g} rad is below 4π; the closed form assumes θ ≫ π and drops dispersive terms.")

    return DerivedRates(
        a=a,
        b=b,
        transverse_rate=transverse,
        omega_tau=omega_tau,
        pulses_per_block=pulses,
        nutation_phase_total=theta,
        integer_turns=turns,
        fractional_phase=fractional,
        coherent_weight_ground=b0,
        coherent_weight_metastable=b1,
        repeat_prob_on=p0,
        repeat_prob_off=p1,
        phase_diffusion_rate=(2.0 * a - b) / tau,
        decay_rate=2.0 * b / tau,
        valid_regime=valid,
    )


def derive_rates(params: ExperimentParams) -> DerivedRates:
    """Repeat probabilities for a single drive pulse between probes."""
    return block_rates(params, 1)


def survival_probability(p: float, q: int) -> float:
    """V(q) = p^q, the collapse-model probability of q repeated results."""
    if not 0.0 <= p <= 1.0:
        raise InvalidParams(f"probability must lie in [0, 1], got {p}")
    if q < 0:
        raise InvalidParams(f"q must be >= 0, got {q}")
    return p ** q


def coherent_survival(omega_tau: float, q: int) -> float:
    """V_coh(q) = cos²(qΩτ/2), the no-reduction alternative."""
    if q < 0:
        raise InvalidParams(f"q must be >= 0, got {q}")
    return math.cos(q * omega_tau / 2.0) ** 2


def regime_check(
    drive_rabi: float,
    probe_rabi: float,
    probe_decay: float,
    threshold: float = DEFAULT_REGIME_THRESHOLD,
) -> RegimeReport:
    """
    Evaluates the good-measurement conditions AΩ_d/Ω_p ≪ 1 and Ω_p/A ≪ 1.

    The first expression is evaluated exactly as written even though it carries
    units of a rate; Ω_d/Ω_p is reported alongside it.

    Args:
        drive_rabi (float): Ω_d, rad/s.
        probe_rabi (float): Ω_p, rad/s.
        probe_decay (float): A, 1/s.
        threshold (float): Value below which a ratio counts as "≪ 1".

    Returns:
        RegimeReport: Both ratios, Ω_d/Ω_p and the combined flag.
    """
    for name, value in (("drive_rabi", drive_rabi), ("probe_rabi", probe_rabi), ("probe_decay", probe_decay)):
        if not value > 0.0:
            logger.warning(f"regime_check rejected {name}={value}")
            raise InvalidParams(f"{name} must be > 0, got {value}")

    drive_ratio = probe_decay * drive_rabi / probe_rabi
    probe_ratio = probe_rabi / probe_decay
    return RegimeReport(
        drive_ratio=drive_ratio,
        probe_ratio=probe_ratio,
        drive_to_probe=drive_rabi / probe_rabi,
        threshold=threshold,
        in_regime=drive_ratio < threshold and probe_ratio < threshold,
    )


def qnd_defect(joint_evolution: np.ndarray, observable: np.ndarray) -> float:
    """
    Returns max |U†xU − x|; zero certifies the QND condition U†xU − x = 0.

    Raises:
        DimensionMismatch: Non-square, unequal or oversized matrices.
        NotUnitary: If max |U†U − I| exceeds 1e-10.
    """
    u = np.asarray(joint_evolution, dtype=complex)
    x = np.asarray(observable, dtype=complex)
    if u.ndim != 2 or u.shape[0] != u.shape[1]:
        raise DimensionMismatch(f"joint evolution must be square, got shape {u.shape}")
    if x.shape != u.shape:
        raise DimensionMismatch(f"observable shape {x.shape} does not match evolution shape {u.shape}")
    if u.shape[0] > MAX_QND_DIMENSION:
        raise DimensionMismatch(f"dimension {u.shape[0]} exceeds {MAX_QND_DIMENSION}")

    identity = np.eye(u.shape[0], dtype=complex)
    if np.max(np.abs(u.conj().T @ u - identity)) > UNITARITY_TOLERANCE:
        raise NotUnitary("joint evolution is not unitary within 1e-10")

    return float(np.max(np.abs(u.conj().T @ x @ u - x)))
