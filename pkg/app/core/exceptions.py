from typing import List, Optional, Sequence

from pydantic import BaseModel


class LocatedError(BaseModel):
    section: str
    key: str = ""
    reason: str


class ParkloopError(Exception):
    """Base class for every error raised by the simulation engine."""


class DomainError(ParkloopError, ValueError):
    pass


class NumericError(ParkloopError, ArithmeticError):
    def __init__(
        self,
        message: str,
        location: Optional[int] = None,
        channel: Optional[int] = None,
        row: Optional[int] = None,
    ):
        super().__init__(message)
        self.location = location
        self.channel = channel
        # batch row of the offending run when several runs step together
        self.row = row

    def __reduce__(self):
        return (type(self), (str(self), self.location, self.channel, self.row))


class ScenarioSyntaxError(ParkloopError, ValueError):
    pass


class ScenarioValidationError(ParkloopError, ValueError):
    def __init__(self, errors: Sequence[LocatedError]):
        self.errors: List[LocatedError] = list(errors)
        lines = [f"{err.section}.{err.key}: {err.reason}" if err.key else f"{err.section}: {err.reason}" for err in self.errors]
        super().__init__("invalid scenario: " + "; ".join(lines))

    def __reduce__(self):
        return (type(self), (self.errors,))


class StabilityError(ParkloopError):
    def __init__(self, unstable: Sequence[tuple[str, int, float]]):
        # (bank, channel, spectral radius)
        self.unstable = list(unstable)
        details = ", ".join(
            f"{bank} channel {channel} (spectral radius {radius:.6g})"
            for bank, channel, radius in self.unstable
        )
        super().__init__(f"stability precondition violated: {details}")

    def __reduce__(self):
        return (type(self), (self.unstable,))


class ConvergenceError(ParkloopError):
    def __init__(self, message: str, last_iterate: Sequence[float], residual: float):
        super().__init__(message)
        self.last_iterate = list(last_iterate)
        self.residual = residual

    def __reduce__(self):
        return (type(self), (str(self), self.last_iterate, self.residual))


class RunFailure(ParkloopError):
    def __init__(self, run_index: int, seed: int, reason: str):
        super().__init__(f"run {run_index} (seed {seed}, spawn key ({run_index},)) failed: {reason}")
        self.run_index = run_index
        self.seed = seed
        self.reason = reason

    def __reduce__(self):
        return (type(self), (self.run_index, self.seed, self.reason))


class OutputError(ParkloopError):
    def __init__(self, path: str, reason: str):
        super().__init__(f"could not write {path}: {reason}")
        self.path = path
        self.reason = reason

    def __reduce__(self):
        return (type(self), (self.path, self.reason))


def exit_code_for(error: BaseException) -> int:
    """CLI exit code: 1 for validation failures, 2 for runtime failures."""
    if isinstance(error, (ScenarioValidationError, ScenarioSyntaxError, DomainError)):
        return 1
    return 2
