# src/cli.py

import argparse
import logging
import os
import sys
from typing import Dict, List, Optional, TextIO

from dotenv import load_dotenv
from pydantic import ValidationError

# Add the project root to sys.path to resolve 'src' imports
project_root = os.path.abspath(os.path.join(os.path.dirname(__file__), '..'))
if project_root not in sys.path:
    sys.path.insert(0, project_root)

from src.core.bloch import excitation_spectrum
from src.core.errors import InsufficientData, InvalidParams, NoGroundOccurrences, ZenoError
from src.core.model import block_rates
from src.core.protocol import (
    DeltaBEstimate,
    delta_b_from_points,
    end_to_end_recovery,
    unwrap_phase,
)
from src.core.statistics import (
    fit_parameters,
    markov_order_test,
    pooled_excitation_probability,
    pooled_histogram,
)
from src.core.trajectory import SimMode, simulate_ensemble
from src.data_io.config_loader import RunConfig, load_run_config
from src.data_io.trajectory_files import TrajectoryFile, write_histogram_csv, write_spectrum_csv

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 4
LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def _fmt(value) -> str:
    """12 significant digits for floats, plain text otherwise."""
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        return format(value, ".12g")
    if hasattr(value, "value"):
        return str(value.value)
    if isinstance(value, tuple):
        return ":".join(_fmt(v) for v in value if v is not None)
    if isinstance(value, list):
        separator = ";" if value and isinstance(value[0], tuple) else ","
        return separator.join(_fmt(v) for v in value)
    return str(value)


def _emit(lines: Dict[str, object], out: TextIO) -> None:
    for key, value in lines.items():
        out.write(f"{key}={_fmt(value)}\n")


def _load(args: argparse.Namespace) -> RunConfig:
    if not args.config:
        raise InvalidParams("--config PATH is required for this command")
    config = load_run_config(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["master_seed"] = args.seed
    if args.mode is not None:
        overrides["mode"] = SimMode(args.mode)
    if args.threads is not None:
        overrides["threads"] = args.threads
    if not overrides:
        return config
    # re-validate so command-line values meet the same bounds as file values
    return RunConfig.model_validate({**config.model_dump(exclude_unset=True), **overrides})


def cmd_derive(args: argparse.Namespace, out: TextIO) -> int:
    """Echoes the parsed config, then a, b, γ_ph, θ, s, θ′, B₀, B₁, p₀, p₁ as key=value lines."""
    config = _load(args)
    params = config.experiment_params()
    rates = block_rates(params, params.pulses_per_measurement)
    _emit(config.echo(), out)
    _emit(
        {
            "a": rates.a,
            "b": rates.b,
            "gamma_ph": rates.phase_diffusion_rate,
            "transverse_rate": rates.transverse_rate,
            "omega_tau": rates.omega_tau,
            "theta": rates.nutation_phase_total,
            "s": rates.integer_turns,
            "theta_prime": rates.fractional_phase,
            "B0": rates.coherent_weight_ground,
            "B1": rates.coherent_weight_metastable,
            "p0": rates.repeat_prob_on,
            "p1": rates.repeat_prob_off,
            "valid_regime": rates.valid_regime,
        },
        out,
    )
    return EXIT_OK


def cmd_simulate(args: argparse.Namespace, out: TextIO) -> int:
    config = _load(args)
    ensemble = simulate_ensemble(
        config.experiment_params(),
        config.mode,
        config.ensemble_count,
        config.master_seed,
        threads=config.worker_count(),
        phase_per_step=config.integration_phase_step,
    )
    path = args.out or config.output_path
    if path:
        TrajectoryFile.write(ensemble, path)
    else:
        out.write(TrajectoryFile.dumps(ensemble))
    return EXIT_OK


def cmd_spectrum(args: argparse.Namespace, out: TextIO) -> int:
    config = _load(args)
    detuning_min, detuning_max, detuning_step = config.spectrum_range()
    points = excitation_spectrum(
        config.experiment_params(),
        detuning_min,
        detuning_max,
        detuning_step,
        phase_per_step=config.integration_phase_step,
        threads=config.worker_count(),
    )
    path = args.out or config.output_path
    text = write_spectrum_csv(points, path)
    if not path:
        out.write(text)
    return EXIT_OK


def cmd_analyze(args: argparse.Namespace, out: TextIO) -> int:
    """Fit report as key=value lines plus the run-histogram CSV."""
    config = _load(args) if args.config else None
    fallback = config.experiment_params() if config is not None else None
    _, trajectories = TrajectoryFile.read(args.trajectory_file, fallback)
    if len(trajectories) < 2:
        raise InsufficientData(f"need at least 2 trajectories, file holds {len(trajectories)}")

    report = fit_parameters(trajectories)
    lines: Dict[str, object] = {
        "trajectories": report.trajectories,
        "total_relaxation": report.total_relaxation,
        "total_relaxation_error": report.total_relaxation_error,
        "theta_prime": report.fractional_phase,
        "theta_prime_error": report.fractional_phase_error,
        "theta_prime_alternate": report.alternate_phase,
        "theta_prime_ambiguous": report.phase_ambiguous,
        "f1": report.mixing_factor,
        "f1_error": report.mixing_factor_error,
        "p0_calibration": report.calibration_repeat_prob.repeat_prob,
        "p0_calibration_error": report.calibration_repeat_prob.standard_error,
        "p0": report.repeat_prob_on.repeat_prob,
        "p0_error": report.repeat_prob_on.standard_error,
        "p1": report.repeat_prob_off.repeat_prob,
        "p1_error": report.repeat_prob_off.standard_error,
        "chi_square": report.goodness_of_fit.statistic,
        "chi_square_dof": report.goodness_of_fit.dof,
        "chi_square_p_value": report.goodness_of_fit.p_value,
    }
    try:
        excitation = pooled_excitation_probability(trajectories[1:])
        lines["excitation_probability"] = excitation.probability
        lines["excitation_probability_error"] = excitation.standard_error
    except NoGroundOccurrences as e:
        logger.warning(f"Excitation probability skipped: {e}")
    lines["markov_order_p_value"] = markov_order_test(trajectories[1]).p_value
    _emit(lines, out)

    hist_path = args.out or (config.histogram_path if config is not None else None) or f"{args.trajectory_file}.hist.csv"
    write_histogram_csv(pooled_histogram(trajectories), hist_path)
    return EXIT_OK


def _report_delta_b(estimate: DeltaBEstimate, out: TextIO) -> None:
    _emit(
        {
            "delta_b": estimate.delta_b,
            "delta_b_error": estimate.standard_error,
            "delta_21": estimate.delta_21,
            "delta_21_error": estimate.delta_21_error,
            "delta_m1": estimate.delta_m1,
            "delta_m1_error": estimate.delta_m1_error,
            "ratio": estimate.ratio,
            "ratio_error": estimate.ratio_error,
            "a_minus_b1": estimate.a_minus_b1,
            "a_minus_b1_error": estimate.a_minus_b1_error,
            "m": estimate.m,
            "error_model": estimate.error_model,
        },
        out,
    )


def cmd_zeno_test(args: argparse.Namespace, out: TextIO) -> int:
    """δb from supplied phases, or from a simulated end-to-end run with --simulate."""
    config = _load(args)
    params = config.experiment_params()

    if args.simulate:
        n_values = config.protocol_n_values
        b_values = config.protocol_b_values
        if len(n_values) != 3 or n_values[:2] != [1, 2] or len(b_values) != 3 or config.protocol_a is None:
            raise InvalidParams("--simulate needs protocol_n_values = 1,2,m, three protocol_b_values and protocol_a")
        estimate = end_to_end_recovery(
            params,
            config.protocol_a,
            b_values[0],
            b_values[1],
            b_values[2],
            n_values[2],
            config.ensemble_count,
            config.master_seed,
            error_model=config.error_model,
            threads=config.worker_count(),
        )
        _report_delta_b(estimate, out)
        return EXIT_OK

    if not config.protocol_phases:
        raise InvalidParams("zeno-test needs protocol_phases (or --simulate)")
    points = []
    for n, theta_prime, sigma in config.protocol_phases:
        reference = block_rates(params, n).nutation_phase_total
        error = sigma if sigma is not None else (config.sigma_theta_prime or 0.0)
        points.append(unwrap_phase(theta_prime, reference, n, error))

    a_minus_b1: Optional[float] = None
    if config.protocol_a is not None and config.protocol_b_values:
        a_minus_b1 = config.protocol_a - config.protocol_b_values[0]
    estimate = delta_b_from_points(points, params.omega_tau, a_minus_b1=a_minus_b1, error_model=config.error_model)
    _report_delta_b(estimate, out)
    return EXIT_OK


COMMANDS = {
    "derive": cmd_derive,
    "simulate": cmd_simulate,
    "spectrum": cmd_spectrum,
    "analyze": cmd_analyze,
    "zeno-test": cmd_zeno_test,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="Run config file (key = value lines)")
    common.add_argument("--seed", type=int, help="Master seed, overrides the config")
    common.add_argument("--out", help="Output path")
    common.add_argument("--mode", choices=[m.value for m in SimMode], help="Simulation mode")
    common.add_argument("--threads", type=int, help="Worker threads; never changes output")
    common.add_argument("--log-level", default=None, help="Logging level (default: $ZENO_LOG_LEVEL or WARNING)")

    parser = argparse.ArgumentParser(prog="zeno", description="Quantum Zeno single-ion simulator and estimators")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("derive", parents=[common], help="Print derived rates")
    sub.add_parser("simulate", parents=[common], help="Write a trajectory file")
    sub.add_parser("spectrum", parents=[common], help="Write the excitation spectrum CSV")
    analyze = sub.add_parser("analyze", parents=[common], help="Fit a trajectory file")
    analyze.add_argument("trajectory_file")
    zeno = sub.add_parser("zeno-test", parents=[common], help="Estimate the decay change from the nutation phases")
    zeno.add_argument("--simulate", action="store_true", help="Run the simulated end-to-end protocol")
    return parser


def main(argv: Optional[List[str]] = None, out: Optional[TextIO] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    level = (args.log_level or os.getenv("ZENO_LOG_LEVEL", "WARNING")).upper()
    logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr)
    out = out if out is not None else sys.stdout

    try:
        return COMMANDS[args.command](args, out)
    except ValidationError as e:
        logger.error(f"Invalid config: {e}")
        print(f"error: invalid config: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ZenoError as e:
        logger.error(f"{type(e).__name__}: {e}")
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        logger.error(f"I/O failure: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except Exception:
        logger.exception("Unexpected failure")
        return 1


if __name__ == "__main__":
    sys.exit(main())
