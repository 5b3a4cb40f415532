# src/data_io/trajectory_files.py

import io
import logging
from typing import Dict, List, Optional, Sequence, TextIO, Tuple

import numpy as np
import pandas as pd

from src.core.bloch import SpectrumPoint
from src.core.errors import TrajectoryFormatError
from src.core.model import TWO_PI, ExperimentParams, MeasurementOutcome, Trajectory
from src.core.statistics import RunHistogram
from src.core.trajectory import EnsembleResult, derive_seed

logger = logging.getLogger(__name__)

TRAJECTORY_FORMAT = "zeno-traj/1"
CSV_FLOAT_FORMAT = "%.9g"
HISTOGRAM_COLUMNS = ["q", "on_exact", "on_cum", "off_exact", "off_cum", "u_over_u1_on", "u_over_u1_off"]


def _format_value(value) -> str:
    if isinstance(value, float):
        return repr(value)
    if hasattr(value, "value"):
        return str(value.value)
    return str(value)


class TrajectoryFile:
    """
    Reader and writer for the line-oriented trajectory format: `#` header lines of
    key=value provenance, then one line of '0'/'1' characters per trajectory.
    """

    @staticmethod
    def header(ensemble: EnsembleResult) -> Dict[str, str]:
        fields = {
            "format": TRAJECTORY_FORMAT,
            "mode": _format_value(ensemble.mode),
            "master_seed": str(ensemble.master_seed),
            "count": str(len(ensemble.trajectories)),
        }
        for name, value in ensemble.params.model_dump().items():
            fields[name] = _format_value(value)
        return fields

    @staticmethod
    def dump(ensemble: EnsembleResult, stream: TextIO) -> None:
        for key, value in TrajectoryFile.header(ensemble).items():
            stream.write(f"# {key}={value}\n")
        for trajectory in ensemble.trajectories:
            stream.write(trajectory.outcomes + "\n")

    @staticmethod
    def dumps(ensemble: EnsembleResult) -> str:
        buffer = io.StringIO()
        TrajectoryFile.dump(ensemble, buffer)
        return buffer.getvalue()

    @staticmethod
    def write(ensemble: EnsembleResult, path: str) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            TrajectoryFile.dump(ensemble, f)
        logger.info(f"Wrote {len(ensemble.trajectories)} trajectories to {path}")

    @staticmethod
    def parse(text: str, fallback_params: Optional[ExperimentParams] = None) -> Tuple[Dict[str, str], List[Trajectory]]:
        """
        Parses trajectory text.

        Header params take precedence; a header-less file needs `fallback_params`,
        whose N is replaced by each line's length.

        Returns:
            Tuple[Dict[str, str], List[Trajectory]]: Header fields and trajectories in file order.
        """
        header: Dict[str, str] = {}
        lines: List[str] = []
        for number, raw in enumerate(text.splitlines(), start=1):
            if raw.startswith("#"):
                body = raw[1:].strip()
                if "=" not in body:
                    continue
                key, value = body.split("=", 1)
                header[key.strip()] = value.strip()
                continue
            line = raw.strip()
            if not line:
                continue
            if set(line) - {MeasurementOutcome.ON.value, MeasurementOutcome.OFF.value}:
                raise TrajectoryFormatError(f"line {number}: only '0' and '1' are allowed")
            lines.append(line)

        if header and header.get("format") != TRAJECTORY_FORMAT:
            raise TrajectoryFormatError(f"unsupported trajectory format {header.get('format')!r}")

        param_keys = set(ExperimentParams.model_fields)
        if param_keys & set(header):
            try:
                params = ExperimentParams(**{k: v for k, v in header.items() if k in param_keys})
            except ValueError as e:
                raise TrajectoryFormatError(f"invalid params in header: {e}") from e
        elif fallback_params is not None:
            params = fallback_params
        else:
            raise TrajectoryFormatError("file carries no params header and no config params were given")

        try:
            master_seed = int(header.get("master_seed", 0))
        except ValueError as e:
            raise TrajectoryFormatError(f"master_seed must be an integer: {e}") from e
        trajectories = []
        for index, line in enumerate(lines):
            line_params = params
            if len(line) != params.measurements_per_trajectory:
                if param_keys & set(header):
                    raise TrajectoryFormatError(
                        f"trajectory {index} has {len(line)} outcomes, header says {params.measurements_per_trajectory}"
                    )
                line_params = params.model_copy(update={"measurements_per_trajectory": len(line)})
            trajectories.append(Trajectory(outcomes=line, seed=derive_seed(master_seed, index), params=line_params))
        logger.info(f"Parsed {len(trajectories)} trajectories")
        return header, trajectories

    @staticmethod
    def read(path: str, fallback_params: Optional[ExperimentParams] = None) -> Tuple[Dict[str, str], List[Trajectory]]:
        with open(path, "r", encoding="utf-8") as f:
            return TrajectoryFile.parse(f.read(), fallback_params)


def _to_csv(frame: pd.DataFrame, path: Optional[str]) -> str:
    text = frame.to_csv(index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n")
    if path is not None:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
        logger.info(f"Wrote {len(frame)} rows to {path}")
    return text


def spectrum_frame(points: Sequence[SpectrumPoint]) -> pd.DataFrame:
    return pd.DataFrame(
        {
            "detuning_hz": [p.detuning / TWO_PI for p in points],
            "p01": [p.excitation_probability for p in points],
        }
    )


def write_spectrum_csv(points: Sequence[SpectrumPoint], path: Optional[str] = None) -> str:
    """Columns detuning_hz,p01 at 9 significant digits; returns the CSV text."""
    return _to_csv(spectrum_frame(points), path)


def histogram_frame(hist: RunHistogram) -> pd.DataFrame:
    longest = max(hist.longest(MeasurementOutcome.ON), hist.longest(MeasurementOutcome.OFF))
    q = np.arange(1, longest + 1)
    columns = {"q": q}
    for species, prefix in ((MeasurementOutcome.ON, "on"), (MeasurementOutcome.OFF, "off")):
        exact = hist.runs(species)
        cumulative = hist.cumulative(species)
        columns[f"{prefix}_exact"] = [exact.get(int(k), 0) for k in q]
        columns[f"{prefix}_cum"] = [cumulative.get(int(k), 0) for k in q]
    for species, prefix in ((MeasurementOutcome.ON, "on"), (MeasurementOutcome.OFF, "off")):
        first = columns[f"{prefix}_cum"][0] if longest else 0
        columns[f"u_over_u1_{prefix}"] = [c / first if first else np.nan for c in columns[f"{prefix}_cum"]]
    return pd.DataFrame(columns, columns=HISTOGRAM_COLUMNS)


def write_histogram_csv(hist: RunHistogram, path: Optional[str] = None) -> str:
    """Columns q,on_exact,on_cum,off_exact,off_cum,u_over_u1_on,u_over_u1_off."""
    return _to_csv(histogram_frame(hist), path)
