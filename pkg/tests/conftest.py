# tests/conftest.py

import math
import os
import sys

import pytest

# Add the project root to sys.path to resolve 'src' imports
project_root = os.path.abspath(os.path.join(os.path.dirname(__file__), '..'))
if project_root not in sys.path:
    sys.path.insert(0, project_root)

from src.core.model import ExperimentParams

TAU = 0.002


@pytest.fixture
def section8_params() -> ExperimentParams:
    """a = 0.4, b = 0.2, Ωτ = 2π at τ = 2 ms (Γ = 200/s, γ_ph = 300/s), f₀ = 1/2."""
    return ExperimentParams.from_relaxation(2.0 * math.pi / TAU, TAU, 0.4, 0.2)


@pytest.fixture
def undamped():
    """Factory for undamped resonant params at a given Ωτ with f₀ = f₁ = 1."""
    def _make(omega_tau: float, measurements: int = 500, **kwargs) -> ExperimentParams:
        return ExperimentParams(
            rabi_frequency=omega_tau / TAU,
            drive_duration=TAU,
            ground_branching_factor=1.0,
            metastable_mixing_factor=1.0,
            measurements_per_trajectory=measurements,
            **kwargs,
        )
    return _make


@pytest.fixture
def write_config(tmp_path):
    """Writes a key = value run file and returns its path."""
    def _write(text: str, name: str = "run.conf") -> str:
        path = tmp_path / name
        path.write_text(text, encoding="utf-8")
        return str(path)
    return _write
