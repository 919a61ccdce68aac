"""Exception types raised by the identification library.

Everything derives from :class:`BasisIdError` so callers can catch library
failures with a single except clause while still distinguishing the
interesting cases (divergence, rank deficiency, parse errors) when needed.
"""

from __future__ import annotations


class BasisIdError(Exception):
    """Base class for all errors raised by this package."""


class DimensionMismatchError(BasisIdError, ValueError):
    """An array argument has a shape incompatible with the model or basis."""


class DivergenceError(BasisIdError):
    """A simulated or filtered state left the representable range.

    Attributes
    ----------
    time_index : int or None
        Zero-based time step at which the first non-finite state appeared.
    iteration : int or None
        One-based identification iteration, when the divergence happened
        inside an identification run.
    """

    def __init__(self, message: str, time_index: int | None = None,
                 iteration: int | None = None):
        self.time_index = time_index
        self.iteration = iteration
        parts = [message]
        if time_index is not None:
            parts.append(f"time index {time_index}")
        if iteration is not None:
            parts.append(f"iteration {iteration}")
        super().__init__(" | ".join(parts))


class DegenerateWeightsError(BasisIdError):
    """All particle weights underflowed and no recovery was requested."""


class RankDeficiencyError(BasisIdError):
    """The regularized normal equations were singular in a parameter update.

    Attributes
    ----------
    equation : str or None
        ``"state"`` or ``"measurement"``.
    row : int or None
        Output row whose solve failed, when the update runs row by row.
    """

    def __init__(self, message: str, equation: str | None = None,
                 row: int | None = None):
        self.equation = equation
        self.row = row
        extra = []
        if equation is not None:
            extra.append(f"equation={equation}")
        if row is not None:
            extra.append(f"row={row}")
        if extra:
            message = f"{message} ({', '.join(extra)})"
        super().__init__(message)


class DataParseError(BasisIdError, ValueError):
    """A data file could not be parsed.

    Attributes
    ----------
    line : int or None
        One-based line number of the offending record, when known.
    """

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ModelFormatError(BasisIdError, ValueError):
    """A serialized model file is malformed, unsupported, or inconsistent."""
