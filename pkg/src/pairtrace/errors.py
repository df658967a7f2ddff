"""Exception hierarchy shared by all pipeline stages."""

from __future__ import annotations


class PairtraceError(Exception):
    """Base class for every error raised by pairtrace."""


class InvalidArgumentError(PairtraceError, ValueError):
    """An argument is outside the documented domain of an operation."""


class ContractError(PairtraceError, ValueError):
    """A precondition on the input data (e.g. time ordering) does not hold."""


class ParseError(PairtraceError, ValueError):
    """A file does not conform to its format.

    ``offset`` is the byte offset of the offending record.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class HitValidationError(PairtraceError, ValueError):
    """Records reference pixels outside the sensor."""

    def __init__(self, message: str, indices):
        shown = ", ".join(str(int(i)) for i in list(indices)[:20])
        more = "" if len(indices) <= 20 else f", ... ({len(indices)} total)"
        super().__init__(f"{message}: record indices [{shown}{more}]")
        self.indices = list(int(i) for i in indices)


class DegenerateImagingPlaneError(PairtraceError, ValueError):
    """Ray angles cannot be recovered because the two planes are conjugate (b ~ 0)."""

    def __init__(self, matrix, b_min: float):
        super().__init__(
            f"|b| = {abs(matrix.b):.3e} m <= b_min = {b_min:.1e} m; planes are conjugate, "
            f"angle unrecoverable for matrix {matrix}"
        )
        self.matrix = matrix
        self.b_min = b_min


class NoCorrelationFoundError(PairtraceError):
    """The delay histogram has no significant coincidence peak."""

    def __init__(self, message: str, histogram=None):
        super().__init__(message)
        self.histogram = histogram


class ConfigError(PairtraceError):
    """Pipeline configuration is malformed; ``key`` names the offending entry."""

    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        where = []
        if key:
            where.append(f"key '{key}'")
        if line is not None:
            where.append(f"line {line}")
        prefix = f"[{', '.join(where)}] " if where else ""
        super().__init__(prefix + message)
        self.key = key
        self.line = line
