"""Exception hierarchy shared by all cdg modules.

Exit-code mapping used by the CLI: ConfigError -> 2, DataError -> 3,
CompatError -> 4. Everything else is an ordinary crash.
"""


class CdgError(Exception):
    """Base class for all library errors."""


class ConfigError(CdgError):
    """Invalid or missing run configuration."""

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        self.path = path
        self.line = line
        prefix = ""
        if path is not None:
            prefix = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(prefix + message)


class DataError(CdgError):
    """Problems with input price data."""


class MissingColumn(DataError):
    pass


class NonPositivePrice(DataError):
    def __init__(self, message: str, row: int | None = None):
        self.row = row
        super().__init__(message)


class UnsortableTimestamps(DataError):
    pass


class EmptyIntersection(DataError):
    pass


class InsufficientHistory(DataError):
    def __init__(self, t: int, max_lag: int):
        self.t = t
        self.max_lag = max_lag
        super().__init__(f"time index {t} has fewer than max_lag={max_lag} bars of history")


class PanelTooShort(DataError):
    pass


class WindowOutOfRange(DataError):
    pass


class WindowTooShort(DataError):
    pass


class CompatError(CdgError):
    """Shape, layout or version incompatibilities."""


class DimMismatch(CompatError):
    pass


class LayoutMismatch(CompatError):
    pass


class HeadCountMismatch(CompatError):
    pass


class BadBounds(CdgError):
    pass


class NonPositiveWorth(CdgError):
    pass


class WorthWipeout(CdgError):
    """Transaction cost factor wiped out the entire worth."""


class NotEnoughSamples(CdgError):
    pass


class BadIndex(CdgError):
    pass


class DegenerateSigma(CdgError):
    pass


class LengthMismatch(CdgError):
    pass


class BadParams(ConfigError):
    def __init__(self, message: str):
        super().__init__(message)
