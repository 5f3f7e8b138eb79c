"""Exception types raised across the package."""

from __future__ import annotations


class KServerError(Exception):
    """Base class for every error raised by kserver."""


class BadParams(KServerError, ValueError):
    pass


class MetricError(KServerError, ValueError):
    pass


class NotSquare(MetricError):
    pass


class AsymmetricMatrix(MetricError):
    def __init__(self, i: int, j: int, a: float, b: float):
        super().__init__(f"dist[{i}][{j}]={a!r} != dist[{j}][{i}]={b!r}")
        self.i, self.j = i, j


class NonzeroDiagonal(MetricError):
    def __init__(self, i: int, value: float):
        super().__init__(f"dist[{i}][{i}]={value!r} must be 0")
        self.i = i


class NonpositiveOffDiagonal(MetricError):
    def __init__(self, i: int, j: int, value: float):
        super().__init__(f"dist[{i}][{j}]={value!r} must be > 0")
        self.i, self.j = i, j


class TriangleViolation(MetricError):
    def __init__(self, i: int, s: int, j: int, excess: float):
        super().__init__(
            f"d({i},{j}) exceeds d({i},{s}) + d({s},{j}) by {excess:.3e}"
        )
        self.i, self.s, self.j = i, s, j
        self.excess = excess


class ParseError(KServerError, ValueError):
    def __init__(self, msg: str, line: int, column: int):
        super().__init__(f"{msg} (line {line}, column {column})")
        self.line, self.column = line, column


class UnknownLeaf(KServerError, KeyError):
    pass


class TooManyServers(KServerError, ValueError):
    pass


class DuplicateLeaf(KServerError, ValueError):
    pass


class ModeError(KServerError, ValueError):
    """The tree or instance does not fit the requested algorithm mode."""


class RequestAlreadyServed(KServerError):
    pass


class InfeasiblePrimal(KServerError):
    def __init__(self, t: int, residual: float):
        super().__init__(f"request at step {t} keeps mass {residual:.3e} out of cache")
        self.t = t
        self.residual = residual


class ZeroDual(KServerError):
    pass


class MarginalMismatch(KServerError, ValueError):
    pass


class TooLarge(KServerError):
    pass


class NotATree(KServerError, ValueError):
    pass


class StageError(KServerError):
    """An experiment stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
