# src/data_io/config_loader.py

import logging
import os
from typing import Dict, List, Optional, Tuple

from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field, field_validator

from src.core.bloch import DEFAULT_PHASE_PER_STEP
from src.core.errors import InvalidParams
from src.core.model import TWO_PI, ExperimentParams
from src.core.protocol import ErrorModel
from src.core.trajectory import SimMode

logger = logging.getLogger(__name__)

# Config keys given in Hz; multiplied by 2π on the way into the library.
HZ_KEYS = ("rabi_frequency", "detuning", "detuning_min", "detuning_max", "detuning_step")


class RunConfig(BaseModel):
    """
    One run file: the ExperimentParams fields (frequencies in Hz) plus run settings.
    Unknown keys are rejected.
    """
    model_config = ConfigDict(extra="forbid", frozen=True)

    # Experiment
    rabi_frequency: float = Field(ge=0.0)
    detuning: float = 0.0
    drive_duration: float = Field(gt=0.0)
    inversion_decay_rate: float = Field(0.0, ge=0.0)
    drive_phase_diffusion_rate: float = Field(0.0, ge=0.0)
    probe_duration: float = Field(0.01, ge=0.0)
    ground_branching_factor: float = Field(0.5, gt=0.0, le=1.0)
    metastable_mixing_factor: float = Field(1.0, gt=0.0, le=1.0)
    measurements_per_trajectory: int = Field(500, ge=1)
    pulses_per_measurement: int = Field(1, ge=1)

    # Run
    mode: SimMode = SimMode.ANALYTIC_MARKOV
    ensemble_count: int = Field(1, ge=1)
    master_seed: int = Field(0, ge=0, lt=2 ** 64)
    output_path: Optional[str] = None
    histogram_path: Optional[str] = None
    threads: Optional[int] = Field(None, ge=1)

    # Spectrum
    detuning_min: Optional[float] = None
    detuning_max: Optional[float] = None
    detuning_step: Optional[float] = Field(None, gt=0.0)
    integration_phase_step: float = Field(DEFAULT_PHASE_PER_STEP, gt=0.0, le=0.1)

    # Protocol
    protocol_n_values: List[int] = Field(default_factory=list)
    protocol_phases: List[Tuple[int, float, Optional[float]]] = Field(default_factory=list)
    protocol_b_values: List[float] = Field(default_factory=list)
    protocol_a: Optional[float] = None
    error_model: ErrorModel = ErrorModel.PROPAGATED
    sigma_theta_prime: Optional[float] = Field(None, ge=0.0)

    @field_validator("protocol_n_values", mode="before")
    @classmethod
    def _split_ints(cls, value):
        if isinstance(value, str):
            return [int(item) for item in value.split(",") if item.strip()]
        return value

    @field_validator("protocol_b_values", mode="before")
    @classmethod
    def _split_floats(cls, value):
        if isinstance(value, str):
            return [float(item) for item in value.split(",") if item.strip()]
        return value

    @field_validator("protocol_phases", mode="before")
    @classmethod
    def _split_triples(cls, value):
        # "n:theta_prime[:sigma];n:theta_prime[:sigma];..."
        if not isinstance(value, str):
            return value
        triples = []
        for item in value.split(";"):
            if not item.strip():
                continue
            fields = [part.strip() for part in item.split(":")]
            if len(fields) not in (2, 3):
                raise ValueError(f"protocol phase '{item}' must read n:theta_prime or n:theta_prime:sigma")
            triples.append((int(fields[0]), float(fields[1]), float(fields[2]) if len(fields) == 3 else None))
        return triples

    def experiment_params(self) -> ExperimentParams:
        """ExperimentParams in SI units; Hz values become rad/s."""
        return ExperimentParams(
            rabi_frequency=self.rabi_frequency * TWO_PI,
            detuning=self.detuning * TWO_PI,
            drive_duration=self.drive_duration,
            inversion_decay_rate=self.inversion_decay_rate,
            drive_phase_diffusion_rate=self.drive_phase_diffusion_rate,
            probe_duration=self.probe_duration,
            ground_branching_factor=self.ground_branching_factor,
            metastable_mixing_factor=self.metastable_mixing_factor,
            measurements_per_trajectory=self.measurements_per_trajectory,
            pulses_per_measurement=self.pulses_per_measurement,
        )

    def spectrum_range(self) -> Tuple[float, float, float]:
        """(Δ_min, Δ_max, δω) in rad/s."""
        missing = [k for k in ("detuning_min", "detuning_max", "detuning_step") if getattr(self, k) is None]
        if missing:
            raise InvalidParams(f"spectrum needs config key(s): {', '.join(missing)}")
        return self.detuning_min * TWO_PI, self.detuning_max * TWO_PI, self.detuning_step * TWO_PI

    def worker_count(self) -> int:
        if self.threads is not None:
            return self.threads
        return max(1, int(os.getenv("ZENO_THREADS", "1")))

    def echo(self) -> Dict[str, object]:
        """Keys present in the file with their parsed values, in field order."""
        return {name: getattr(self, name) for name in type(self).model_fields if name in self.model_fields_set}


def parse_run_config(values: Dict[str, Optional[str]]) -> RunConfig:
    """Validates raw key/value strings; unknown keys raise InvalidParams naming them."""
    unknown = sorted(set(values) - set(RunConfig.model_fields))
    if unknown:
        logger.warning(f"Rejected unknown config key(s): {unknown}")
        raise InvalidParams(f"unknown config key(s): {', '.join(unknown)}")
    empty = sorted(key for key, value in values.items() if value is None)
    if empty:
        raise InvalidParams(f"config key(s) without a value: {', '.join(empty)}")
    return RunConfig(**values)


def load_run_config(path: str) -> RunConfig:
    """
    Reads a flat `key = value` run file (`#` comments allowed).

    Args:
        path (str): Config file path.

    Returns:
        RunConfig: Validated config.

    Raises:
        OSError: If the file cannot be read.
        InvalidParams: On unknown keys.
        pydantic.ValidationError: On values violating the ExperimentParams invariants.
    """
    if not os.path.isfile(path):
        raise FileNotFoundError(f"config file not found: {path}")
    values = dotenv_values(path, interpolate=False)
    logger.info(f"Loaded {len(values)} config keys from {path}")
    return parse_run_config(dict(values))
