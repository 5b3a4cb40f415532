# src/core/errors.py

class ZenoError(Exception):
    """Base class for every error raised by the toolkit."""
    exit_code = 1


class InvalidParams(ZenoError, ValueError):
    exit_code = 2


class ImaginaryNutation(ZenoError, ValueError):
    """Raised when (Ωτ)² < (a−b)², i.e. the damped nutation angle is not real."""
    exit_code = 3


class NotUnitary(ZenoError, ValueError):
    exit_code = 2


class DimensionMismatch(ZenoError, ValueError):
    exit_code = 2


class StepTooLarge(ZenoError, ValueError):
    exit_code = 2


class TrajectoryFormatError(ZenoError, ValueError):
    exit_code = 2


class EmptyTrajectory(ZenoError, ValueError):
    exit_code = 5


class NoRuns(ZenoError, ValueError):
    exit_code = 5


class DegenerateHistogram(ZenoError, ValueError):
    exit_code = 5


class InsufficientData(ZenoError, ValueError):
    exit_code = 5


class NoGroundOccurrences(ZenoError, ValueError):
    exit_code = 5


class NonInvertible(ZenoError, ValueError):
    exit_code = 5


class DuplicateN(ZenoError, ValueError):
    exit_code = 2


class DegenerateDamping(ZenoError, ValueError):
    exit_code = 2


class OutOfBranch(ZenoError, ValueError):
    """Raised when 1 − δ₂₁/δ_m1 < 0 and the δb inversion has no real branch."""
    exit_code = 6
