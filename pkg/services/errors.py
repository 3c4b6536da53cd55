from __future__ import annotations

from typing import Any, Sequence


class MfslqError(Exception):
    """Base class for every failure raised by the solver services.

    `stage` is filled in by the pipeline (solve_mfslq) so the CLI and the web
    endpoints can say where a run broke.
    """

    def __init__(self, message: str, *, stage: str | None = None):
        super().__init__(message)
        self.message = message
        self.stage = stage

    def __str__(self) -> str:
        if self.stage:
            return f"[{self.stage}] {self.message}"
        return self.message

    def to_dict(self) -> dict[str, Any]:
        return {"error": type(self).__name__, "message": self.message, "stage": self.stage}


class ConfigError(MfslqError):
    def __init__(self, message: str, *, field: str | None = None, line: int | None = None):
        where = []
        if field:
            where.append(f"field '{field}'")
        if line is not None:
            where.append(f"line {line}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)
        self.field = field
        self.line = line

    def to_dict(self) -> dict[str, Any]:
        d = super().to_dict()
        d.update(field=self.field, line=self.line)
        return d


class ShapeError(MfslqError):
    pass


class CoefficientShapeError(ShapeError):
    def __init__(self, name: str, node: tuple[int, str], shape: tuple[int, ...], expected: tuple[int, ...]):
        level, path = node
        super().__init__(
            f"coefficient {name} at node (level {level}, path '{path}') has shape {shape}, expected {expected}"
        )
        self.name = name
        self.node = node


class ResourceLimitError(MfslqError):
    pass


class UnsupportedGridError(MfslqError):
    pass


class AssumptionError(MfslqError):
    def __init__(self, message: str, violations: Sequence[Any] = ()):
        super().__init__(message)
        self.violations = list(violations)


class DefinitenessError(MfslqError):
    def __init__(self, message: str, *, node: tuple[int, int] | None = None, eigmin: float | None = None):
        super().__init__(message)
        self.node = node
        self.eigmin = eigmin


class StepSizeError(MfslqError):
    pass


class ConvergenceError(MfslqError):
    def __init__(self, message: str, *, iterations: int, last_ratio: float | None):
        super().__init__(message)
        self.iterations = iterations
        self.last_ratio = last_ratio


class FbsdeSingularError(MfslqError):
    def __init__(self, message: str, *, rows: int, cols: int, rank: int | None):
        super().__init__(message)
        self.rows = rows
        self.cols = cols
        self.rank = rank

    @property
    def nullity(self) -> int | None:
        if self.rank is None:
            return None
        return self.cols - self.rank


class InfeasibleStationarityError(MfslqError):
    def __init__(self, message: str, residuals: dict[str, float]):
        super().__init__(message)
        self.residuals = dict(residuals)


class NumericalOverflowError(MfslqError):
    def __init__(self, message: str, *, step: int):
        super().__init__(message)
        self.step = step


class ConditioningError(MfslqError):
    def __init__(self, message: str, *, eig_min: float | None, eig_max: float | None):
        super().__init__(message)
        self.eig_min = eig_min
        self.eig_max = eig_max
