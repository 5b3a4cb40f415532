# src/core/trajectory.py

import logging
from concurrent.futures import ThreadPoolExecutor
from enum import Enum
from typing import List, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from src.core.bloch import DEFAULT_PHASE_PER_STEP, BlochOde, default_step, integrate_bloch
from src.core.errors import InvalidParams
from src.core.model import BlochState, ExperimentParams, Trajectory, block_rates

logger = logging.getLogger(__name__)

RUN_CHUNK = 1024


class SimMode(str, Enum):
    ANALYTIC_MARKOV = "markov"     # two-state chain with p₀, p₁ from the closed form
    BLOCH_PROJECTIVE = "bloch"     # Bloch integration per pole, projection at each probe


class EnsembleResult(BaseModel):
    model_config = ConfigDict(frozen=True)

    trajectories: List[Trajectory] = Field(min_length=1)
    master_seed: int = Field(ge=0)
    mode: SimMode

    @property
    def params(self) -> ExperimentParams:
        return self.trajectories[0].params


def derive_seed(master_seed: int, index: int) -> int:
    """Per-trajectory seed, a pure function of (master_seed, index)."""
    sequence = np.random.SeedSequence(master_seed, spawn_key=(index,))
    return int(sequence.generate_state(1, np.uint64)[0])


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


def repeat_probabilities(
    params: ExperimentParams,
    mode: SimMode,
    phase_per_step: float = DEFAULT_PHASE_PER_STEP,
) -> Tuple[float, float]:
    """
    Probability that a probe repeats the previous result, from On (p₀) and from Off (p₁).

    In Bloch mode every cycle starts from a pole, so one integration per pole over
    n·τ fixes both probabilities for the whole trajectory. For n > 1 the two modes
    differ: Markov mode charges the relaxation pair (a, b) once per block, Bloch mode
    integrates it across all n pulses.
    """
    pulses = params.pulses_per_measurement
    if mode == SimMode.ANALYTIC_MARKOV:
        if params.detuning != 0.0:
            logger.warning(f"Markov mode ignores detuning Δ={params.detuning:.6g} rad/s; the closed form is resonant")
        rates = block_rates(params, pulses)
        return rates.repeat_prob_on, rates.repeat_prob_off

    if params.ground_branching_factor != 1.0 or params.metastable_mixing_factor != 1.0:
        raise InvalidParams("Bloch mode models a bare two-level ion and requires f0 = f1 = 1")
    if pulses > 1:
        logger.warning(
            f"Bloch mode relaxes over all {pulses} pulses; Markov mode applies (a, b) once per block, so the modes disagree"
        )
    ode = BlochOde.from_params(params)
    duration = pulses * params.drive_duration
    step = default_step(ode, duration, phase_per_step)
    from_ground = integrate_bloch(BlochState.ground(), ode, duration, step)
    from_metastable = integrate_bloch(BlochState.metastable(), ode, duration, step)
    p_on = min(1.0, max(0.0, (1.0 + from_ground.w) / 2.0))
    p_off = min(1.0, max(0.0, (1.0 - from_metastable.w) / 2.0))
    return p_on, p_off


def _run_lengths(rng: np.random.Generator, repeat_prob: float, size: int, cap: int) -> np.ndarray:
    # Length of a maximal run is geometric: P(L = k) = p^(k-1)(1 - p).
    if repeat_prob >= 1.0:
        return np.full(size, cap, dtype=np.int64)
    return np.minimum(rng.geometric(1.0 - repeat_prob, size=size), cap)


def sample_outcomes(p_on: float, p_off: float, measurements: int, rng: np.random.Generator) -> str:
    """
    Draws a two-state chain whose first outcome is the On probe of the ground-state ion;
    the remaining N − 1 outcomes follow one drive/probe cycle each.

    Alternating On/Off run lengths are drawn in fixed-size chunks; the result has the
    same law as one Bernoulli draw per probe.
    """
    lengths: List[np.ndarray] = []
    total = 0
    while total < measurements:
        on = _run_lengths(rng, p_on, RUN_CHUNK, measurements)
        off = _run_lengths(rng, p_off, RUN_CHUNK, measurements)
        chunk = np.empty(2 * RUN_CHUNK, dtype=np.int64)
        chunk[0::2] = on
        chunk[1::2] = off
        lengths.append(chunk)
        total += int(chunk.sum())

    runs = np.concatenate(lengths)
    symbols = np.tile(np.array([b"0"[0], b"1"[0]], dtype=np.uint8), runs.size // 2)
    return np.repeat(symbols, runs)[:measurements].tobytes().decode("ascii")


def simulate_trajectory(
    params: ExperimentParams,
    mode: SimMode,
    seed: int,
    phase_per_step: float = DEFAULT_PHASE_PER_STEP,
) -> Trajectory:
    """
    Simulates one ion record of N probe outcomes.

    Args:
        params (ExperimentParams): The experiment; n = pulses_per_measurement drive pulses precede each probe.
        mode (SimMode): Closed-form Markov chain or Bloch integration with projection.
        seed (int): Seed of this trajectory's Philox stream.
        phase_per_step (float): Integrator rotation per step (Bloch mode).

    Returns:
        Trajectory: Outcomes plus the seed and params snapshot.
    """
    p_on, p_off = repeat_probabilities(params, mode, phase_per_step)
    outcomes = sample_outcomes(p_on, p_off, params.measurements_per_trajectory, make_rng(seed))
    return Trajectory(outcomes=outcomes, seed=seed, params=params)


def simulate_ensemble(
    params: ExperimentParams,
    mode: SimMode,
    count: int,
    master_seed: int,
    threads: int = 1,
    phase_per_step: float = DEFAULT_PHASE_PER_STEP,
) -> EnsembleResult:
    """
    Simulates `count` independent trajectories.

    Trajectory i uses derive_seed(master_seed, i), so the result does not depend on
    `threads` or on completion order.
    """
    if count < 1:
        raise InvalidParams(f"ensemble count must be >= 1, got {count}")
    logger.info(f"Simulating {count} trajectories in {mode.value} mode (master seed {master_seed}, {threads} thread(s))")

    p_on, p_off = repeat_probabilities(params, mode, phase_per_step)
    logger.info(f"Repeat probabilities p0={p_on:.6g}, p1={p_off:.6g}")

    def _one(index: int) -> Trajectory:
        seed = derive_seed(master_seed, index)
        outcomes = sample_outcomes(p_on, p_off, params.measurements_per_trajectory, make_rng(seed))
        return Trajectory(outcomes=outcomes, seed=seed, params=params)

    if threads <= 1:
        trajectories = [_one(i) for i in range(count)]
    else:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            trajectories = list(executor.map(_one, range(count)))

    logger.info(f"Finished {count} trajectories")
    return EnsembleResult(trajectories=trajectories, master_seed=master_seed, mode=mode)
