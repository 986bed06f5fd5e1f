"""Exception hierarchy for mixed_trees.

``DataError`` covers problems with inputs, configs and model files; the CLI
maps it to exit code 2. ``FitError`` covers failures while fitting or
predicting and maps to exit code 3.
"""

from __future__ import annotations

from typing import Any, Optional


class MixedTreesError(Exception):
    """Base class for every error raised by this package."""

    exit_code: int = 1


class DataError(MixedTreesError, ValueError):
    exit_code = 2


class FitError(MixedTreesError, RuntimeError):
    exit_code = 3


# --- data side -------------------------------------------------------------


class MissingColumn(DataError):
    def __init__(self, name: str, path: Optional[str] = None) -> None:
        self.name = name
        where = f" in {path}" if path else ""
        super().__init__(f"Missing column {name!r}{where}")


class DuplicateSubjectWave(DataError):
    def __init__(self, subject: str, wave: int) -> None:
        self.subject = subject
        self.wave = wave
        super().__init__(f"Duplicate observation for subject {subject!r} at wave {wave}")


class NonNumericResponse(DataError):
    def __init__(self, row: int, value: Any = None) -> None:
        self.row = row
        super().__init__(f"Non-numeric response on line {row}: {value!r}")


class InvalidWave(DataError):
    def __init__(self, row: int, value: Any = None) -> None:
        self.row = row
        super().__init__(f"Wave must be an integer >= 0 on line {row}, got {value!r}")


class UnknownVariable(DataError):
    def __init__(self, name: str) -> None:
        self.name = name
        super().__init__(f"Unknown variable {name!r}")


class TooFewUnits(DataError):
    def __init__(self, k: int, n: int) -> None:
        self.k = k
        self.n = n
        super().__init__(f"Cannot build {k} folds from {n} units")


class TooFewRows(DataError):
    def __init__(self, k: int, n: int) -> None:
        self.k = k
        self.n = n
        super().__init__(f"Cannot cross-validate with {k} folds on {n} rows")


class FoldMismatch(DataError):
    pass


class MalformedModel(DataError):
    pass


class InvalidSpec(DataError):
    pass


class UnknownPreset(DataError):
    def __init__(self, name: str, known: Optional[list[str]] = None) -> None:
        self.name = name
        hint = f" (known: {', '.join(known)})" if known else ""
        super().__init__(f"Unknown preset {name!r}{hint}")


class LengthMismatch(DataError):
    def __init__(self, left: int, right: int) -> None:
        super().__init__(f"Length mismatch: {left} vs {right}")


# --- fit side --------------------------------------------------------------


class SingularDesign(FitError):
    pass


class MissingSplitValue(FitError):
    def __init__(self, variable: str) -> None:
        self.variable = variable
        super().__init__(f"Missing value for split variable {variable!r}")


class UnknownCluster(FitError):
    def __init__(self, cluster: str) -> None:
        self.cluster = cluster
        super().__init__(f"Cluster {cluster!r} was not seen in training")


class NegativeStatBeyondTolerance(FitError):
    def __init__(self, stat: float) -> None:
        self.stat = stat
        super().__init__(
            f"Likelihood-ratio statistic {stat:.3g} is negative; fits are not nested or did not converge"
        )


class IncompatibleFits(FitError):
    pass


class LeakageError(FitError):
    pass
