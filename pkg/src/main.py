# src/main.py

import os
import sys
import logging
from typing import List, Optional

from fastapi import FastAPI, HTTPException, Query, Request, status
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field, ValidationError
from dotenv import load_dotenv

# Load environment variables
load_dotenv()

# Add the project root to sys.path to resolve 'src' imports
project_root = os.path.abspath(os.path.join(os.path.dirname(__file__), '..'))
if project_root not in sys.path:
    sys.path.insert(0, project_root)

from src.core.bloch import DEFAULT_PHASE_PER_STEP, SpectrumPoint, excitation_spectrum
from src.core.errors import ZenoError
from src.core.model import (
    DEFAULT_REGIME_THRESHOLD,
    DerivedRates,
    ExperimentParams,
    RegimeReport,
    Trajectory,
    derive_rates,
    regime_check,
)
from src.core.protocol import DeltaBEstimate, ErrorModel, ProtocolPoint, delta_b_from_points, ideal_zeno_survival
from src.core.statistics import FitReport, fit_parameters
from src.core.trajectory import SimMode, simulate_ensemble

# --- Logging Configuration ---
logging.basicConfig(level=os.getenv("ZENO_LOG_LEVEL", "INFO").upper(),
                    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)

MAX_SPECTRUM_POINTS = 100_000
MAX_ENSEMBLE = 1_000

# --- FastAPI App Initialization ---
app = FastAPI(
    title="Zeno Ion Toolkit API",
    description="Quantum Zeno single-ion simulator: derived rates, spectra, trajectories, fits and the δb protocol.",
    version="1.0.0"
)

origins = [o for o in os.getenv("ZENO_API_ORIGINS", "http://localhost,http://127.0.0.1").split(",") if o]
app.add_middleware(
    CORSMiddleware,
    allow_origins=origins,
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)


# --- Pydantic Models ---
class SpectrumRequest(BaseModel):
    params: ExperimentParams
    detuning_min: float
    detuning_max: float
    detuning_step: float = Field(gt=0.0)
    phase_per_step: float = Field(DEFAULT_PHASE_PER_STEP, gt=0.0, le=0.1)

class SimulateRequest(BaseModel):
    params: ExperimentParams
    mode: SimMode = SimMode.ANALYTIC_MARKOV
    count: int = Field(1, ge=1, le=MAX_ENSEMBLE)
    master_seed: int = Field(0, ge=0, lt=2 ** 64)

class TrajectoryRecord(BaseModel):
    seed: int
    outcomes: str

class SimulateResponse(BaseModel):
    mode: SimMode
    master_seed: int
    trajectories: List[TrajectoryRecord]

class AnalyzeRequest(BaseModel):
    params: ExperimentParams
    trajectories: List[str] = Field(min_length=2)

class DeltaBRequest(BaseModel):
    points: List[ProtocolPoint] = Field(min_length=3)
    omega_tau: float = Field(gt=0.0)
    a_minus_b1: Optional[float] = None
    a_minus_b1_error: float = Field(0.0, ge=0.0)
    error_model: ErrorModel = ErrorModel.PROPAGATED

class SurvivalResponse(BaseModel):
    total_angle: float
    n: int
    survival: float


def _unprocessable(e: Exception) -> HTTPException:
    logger.warning(f"Rejected request: {type(e).__name__}: {e}")
    return HTTPException(status_code=status.HTTP_422_UNPROCESSABLE_ENTITY, detail=f"{type(e).__name__}: {e}")


# --- API Endpoints ---
@app.get("/", summary="Root endpoint for API health check")
async def read_root():
    logger.info("Root endpoint accessed.")
    return {"message": "Welcome to the Zeno Ion Toolkit API"}

@app.post("/derive", response_model=DerivedRates, summary="Closed-form repeat probabilities")
def derive(params: ExperimentParams):
    try:
        return derive_rates(params)
    except ZenoError as e:
        raise _unprocessable(e)

@app.post("/spectrum", response_model=List[SpectrumPoint], summary="Single-pulse excitation spectrum")
def spectrum(request: SpectrumRequest):
    """
    Integrates the Bloch equations across the detuning grid. All frequencies are in rad/s.
    """
    points = int((request.detuning_max - request.detuning_min) / request.detuning_step) + 1
    if points > MAX_SPECTRUM_POINTS:
        raise HTTPException(status_code=status.HTTP_422_UNPROCESSABLE_ENTITY, detail=f"{points} points exceed {MAX_SPECTRUM_POINTS}")
    try:
        return excitation_spectrum(
            request.params,
            request.detuning_min,
            request.detuning_max,
            request.detuning_step,
            phase_per_step=request.phase_per_step,
        )
    except ZenoError as e:
        raise _unprocessable(e)

@app.post("/simulate", response_model=SimulateResponse, summary="Simulate an ensemble of trajectories")
def simulate(request: SimulateRequest):
    logger.info(f"Simulate request: {request.count} trajectories, mode {request.mode.value}, seed {request.master_seed}")
    try:
        ensemble = simulate_ensemble(request.params, request.mode, request.count, request.master_seed)
    except ZenoError as e:
        raise _unprocessable(e)
    return SimulateResponse(
        mode=ensemble.mode,
        master_seed=ensemble.master_seed,
        trajectories=[TrajectoryRecord(seed=t.seed, outcomes=t.outcomes) for t in ensemble.trajectories],
    )

@app.post("/analyze", response_model=FitReport, summary="Fit a+b, θ′ and f₁ from trajectories")
def analyze(request: AnalyzeRequest):
    """
    The first trajectory calibrates a+b; the rest give θ′ and f₁.
    """
    try:
        trajectories = [
            Trajectory(
                outcomes=outcomes,
                seed=index,
                params=request.params.model_copy(update={"measurements_per_trajectory": len(outcomes)}),
            )
            for index, outcomes in enumerate(request.trajectories)
        ]
        return fit_parameters(trajectories)
    except (ZenoError, ValidationError) as e:
        raise _unprocessable(e)

@app.post("/zeno/delta-b", response_model=DeltaBEstimate, summary="Estimate δb from nutation phases")
def zeno_delta_b(request: DeltaBRequest):
    try:
        return delta_b_from_points(
            request.points,
            request.omega_tau,
            a_minus_b1=request.a_minus_b1,
            a_minus_b1_error=request.a_minus_b1_error,
            error_model=request.error_model,
        )
    except ZenoError as e:
        raise _unprocessable(e)

@app.get("/zeno/survival", response_model=SurvivalResponse, summary="Ideal Zeno survival cos^{2N}(ΩT/2N)")
async def zeno_survival(total_angle: float = Query(...), n: int = Query(..., ge=1)):
    return SurvivalResponse(total_angle=total_angle, n=n, survival=ideal_zeno_survival(total_angle, n))

@app.get("/regime", response_model=RegimeReport, summary="Good-measurement regime check")
async def regime(
    drive_rabi: float = Query(...),
    probe_rabi: float = Query(...),
    probe_decay: float = Query(...),
    threshold: float = Query(DEFAULT_REGIME_THRESHOLD, gt=0.0),
):
    try:
        return regime_check(drive_rabi, probe_rabi, probe_decay, threshold)
    except ZenoError as e:
        raise _unprocessable(e)

@app.exception_handler(Exception)
async def unexpected_error(request: Request, exc: Exception):
    logger.exception(f"Unhandled error on {request.url.path}")
    return JSONResponse(status_code=status.HTTP_500_INTERNAL_SERVER_ERROR, content={"detail": "Internal server error"})


if __name__ == "__main__":
    import uvicorn

    uvicorn.run(app, host=os.getenv("ZENO_API_HOST", "127.0.0.1"), port=int(os.getenv("ZENO_API_PORT", "8000")))
