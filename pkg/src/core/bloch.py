# src/core/bloch.py

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from typing import List, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.core.errors import InvalidParams, StepTooLarge
from src.core.model import BlochState, DerivedRates, ExperimentParams

logger = logging.getLogger(__name__)

# Accuracy guard: rotation per step may not exceed this many radians.
MAX_PHASE_PER_STEP = 0.1
# Default rotation per step; keeps the RK4 global error near 1e-9 over a few turns.
DEFAULT_PHASE_PER_STEP = 0.01
MIN_STEPS = 10


class BlochOde(BaseModel):
    """
    Rotating-frame damped Bloch equations for the driven transition:

        du/dt = Δv − γu
        dv/dt = −Δu − γv + Ωw
        dw/dt = −Ωv − Γ(w − w_eq)
    """
    model_config = ConfigDict(frozen=True, allow_inf_nan=False)

    rabi: float = Field(ge=0.0)
    detuning: float = 0.0
    transverse_rate: float = Field(0.0, ge=0.0)
    inversion_rate: float = Field(0.0, ge=0.0)
    equilibrium_inversion: float = 1.0

    @model_validator(mode="after")
    def _transverse_bound(self) -> "BlochOde":
        if self.transverse_rate < self.inversion_rate / 2.0 * (1.0 - 1e-12):
            raise ValueError(
                f"transverse rate {self.transverse_rate} must be at least half the inversion rate {self.inversion_rate}"
            )
        return self

    @classmethod
    def from_params(cls, params: ExperimentParams, detuning: float | None = None) -> "BlochOde":
        return cls(
            rabi=params.rabi_frequency,
            detuning=params.detuning if detuning is None else detuning,
            transverse_rate=params.drive_phase_diffusion_rate + params.inversion_decay_rate / 2.0,
            inversion_rate=params.inversion_decay_rate,
        )

    @property
    def generalized_rabi(self) -> float:
        return math.hypot(self.rabi, self.detuning)

    def generator(self) -> np.ndarray:
        """Affine generator acting on the augmented vector (u, v, w, 1)."""
        g, d, om, gam = self.transverse_rate, self.detuning, self.rabi, self.inversion_rate
        return np.array(
            [
                [-g, d, 0.0, 0.0],
                [-d, -g, om, 0.0],
                [0.0, -om, -gam, gam * self.equilibrium_inversion],
                [0.0, 0.0, 0.0, 0.0],
            ],
            dtype=float,
        )


class SpectrumPoint(BaseModel):
    detuning: float
    excitation_probability: float = Field(ge=0.0, le=1.0)


def _rk4_propagator(ode: BlochOde, h: float) -> np.ndarray:
    # Classical RK4 applied to a linear autonomous system is this Taylor polynomial.
    a = ode.generator() * h
    a2 = a @ a
    a3 = a2 @ a
    a4 = a3 @ a
    return np.eye(4) + a + a2 / 2.0 + a3 / 6.0 + a4 / 24.0


def default_step(ode: BlochOde, duration: float, phase_per_step: float = DEFAULT_PHASE_PER_STEP) -> float:
    """Largest step honouring both the rotation budget and the ten-steps-per-duration floor."""
    rate = ode.generalized_rabi
    step = duration / MIN_STEPS
    if rate > 0.0:
        step = min(step, phase_per_step / rate)
    return step


def _step_count(ode: BlochOde, duration: float, step: float) -> int:
    if not step > 0.0:
        raise InvalidParams(f"step must be > 0, got {step}")
    if duration < 0.0:
        raise InvalidParams(f"duration must be >= 0, got {duration}")
    if duration > 0.0 and step > duration / MIN_STEPS * (1.0 + 1e-12):
        logger.warning(f"Step {step:.3g} s exceeds duration/{MIN_STEPS} for duration {duration:.3g} s")
        raise StepTooLarge(f"step {step} exceeds duration/{MIN_STEPS}")
    if step * ode.generalized_rabi > MAX_PHASE_PER_STEP:
        logger.warning(f"Step {step:.3g} s rotates {step * ode.generalized_rabi:.3g} rad > {MAX_PHASE_PER_STEP}")
        raise StepTooLarge(
            f"step*sqrt(Omega^2+Delta^2) = {step * ode.generalized_rabi:.3g} exceeds {MAX_PHASE_PER_STEP}"
        )
    return int(math.ceil(duration / step - 1e-9))


def integrate_bloch(initial: BlochState, ode: BlochOde, duration: float, step: float) -> BlochState:
    """
    Advances a Bloch vector with fixed-step classical RK4.

    The requested step is shortened so an integer number of equal steps spans
    the duration exactly.

    Args:
        initial (BlochState): State at t = 0.
        ode (BlochOde): Drive and relaxation parameters.
        duration (float): Integration time, s.
        step (float): Maximum step, s.

    Returns:
        BlochState: State at t = duration.

    Raises:
        StepTooLarge: If step > duration/10 or step·√(Ω²+Δ²) > 0.1.
    """
    steps = _step_count(ode, duration, step)
    if duration == 0.0 or steps == 0:
        return initial
    propagator = np.linalg.matrix_power(_rk4_propagator(ode, duration / steps), steps)
    augmented = np.append(initial.as_array(), 1.0)
    return BlochState.from_array(propagator @ augmented)


def bloch_trajectory(
    initial: BlochState,
    ode: BlochOde,
    duration: float,
    step: float,
    samples: int = 100,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Samples the Bloch vector at `samples` equal intervals (damped Rabi flopping).

    Returns:
        Tuple[np.ndarray, np.ndarray]: Times of shape (samples+1,) and states of shape (samples+1, 3).
    """
    if samples < 1:
        raise InvalidParams(f"samples must be >= 1, got {samples}")
    steps = _step_count(ode, duration, step)
    per_sample = max(1, int(math.ceil(steps / samples)))
    h = duration / (per_sample * samples)
    block = np.linalg.matrix_power(_rk4_propagator(ode, h), per_sample)

    states = np.empty((samples + 1, 4))
    states[0] = np.append(initial.as_array(), 1.0)
    for i in range(samples):
        states[i + 1] = block @ states[i]
    times = np.linspace(0.0, duration, samples + 1)
    return times, states[:, :3]


def nutation_angle(rabi: float, detuning: float, t: float) -> float:
    """θ(t) = √(Ω² + Δ²)·t"""
    if t < 0.0:
        raise InvalidParams(f"t must be >= 0, got {t}")
    return math.hypot(rabi, detuning) * t


def rabi_excitation(rabi: float, detuning: float, t: float) -> float:
    """Closed-form undamped excitation probability from the ground state."""
    generalized_sq = rabi ** 2 + detuning ** 2
    if generalized_sq == 0.0:
        return 0.0
    return rabi ** 2 / generalized_sq * math.sin(math.sqrt(generalized_sq) * t / 2.0) ** 2


def resonant_excitation(rates: DerivedRates, from_ground: bool = True) -> float:
    """
    Exact resonant damped transfer probability for one block, dispersive term included.

    From the ground state this is B₀[1 − e^{−(a+b)}(cos θ + ((a+b)/θ) sin θ)];
    block_rates keeps only the cos θ part. From the metastable state the
    probability of leaving it carries an extra (2b/θ)·e^{−(a+b)}·sin θ.
    """
    theta = rates.nutation_phase_total
    damping = math.exp(-rates.relaxation)
    sinc = float(np.sinc(theta / math.pi))  # sin θ / θ, finite at θ = 0
    oscillation = math.cos(theta) + rates.relaxation * sinc
    if from_ground:
        return rates.coherent_weight_ground * (1.0 - damping * oscillation)
    return rates.coherent_weight_metastable * (1.0 - damping * oscillation) + 2.0 * rates.b * damping * sinc


def _spectrum_point(params: ExperimentParams, detuning: float, phase_per_step: float) -> SpectrumPoint:
    ode = BlochOde.from_params(params, detuning=detuning)
    duration = params.drive_duration
    final = integrate_bloch(BlochState.ground(), ode, duration, default_step(ode, duration, phase_per_step))
    return SpectrumPoint(detuning=detuning, excitation_probability=min(1.0, max(0.0, final.excitation_probability)))


def detuning_grid(detuning_min: float, detuning_max: float, detuning_step: float) -> np.ndarray:
    if not detuning_min < detuning_max:
        raise InvalidParams(f"detuning_min {detuning_min} must be below detuning_max {detuning_max}")
    if not detuning_step > 0.0:
        raise InvalidParams(f"detuning step must be > 0, got {detuning_step}")
    count = int(math.floor((detuning_max - detuning_min) / detuning_step + 1e-9)) + 1
    return detuning_min + detuning_step * np.arange(count)


def excitation_spectrum(
    params: ExperimentParams,
    detuning_min: float,
    detuning_max: float,
    detuning_step: float,
    phase_per_step: float = DEFAULT_PHASE_PER_STEP,
    threads: int = 1,
) -> List[SpectrumPoint]:
    """
    Stroboscopically sampled single-pulse excitation spectrum p₀₁(Δ) = (1 − w)/2.

    Args:
        params (ExperimentParams): Drive and relaxation; params.detuning is ignored.
        detuning_min (float): First sampled Δ, rad/s.
        detuning_max (float): Upper end of the scan, rad/s (included when on the grid).
        detuning_step (float): δω, rad/s.
        phase_per_step (float): Integrator rotation per step.
        threads (int): Worker count; never changes the result.

    Returns:
        List[SpectrumPoint]: Points ordered by detuning.
    """
    grid = detuning_grid(detuning_min, detuning_max, detuning_step)
    logger.info(f"Computing {grid.size} spectrum points with {threads} thread(s)")
    if threads <= 1:
        return [_spectrum_point(params, float(d), phase_per_step) for d in grid]
    with ThreadPoolExecutor(max_workers=threads) as executor:
        return list(executor.map(lambda d: _spectrum_point(params, float(d), phase_per_step), grid))
