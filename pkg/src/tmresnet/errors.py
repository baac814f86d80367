"""Exception types shared across the package."""


class TmResnetError(Exception):
    """Base class for every error raised by this package."""


# ode_core


class NonFiniteState(TmResnetError):
    def __init__(self, message, t=None, step=None):
        super().__init__(message)
        self.t = t
        self.step = step


class HistoryShapeMismatch(TmResnetError):
    pass


class MissingExactSolution(TmResnetError):
    pass


class DegenerateFit(TmResnetError):
    pass


# tensor engine


class ShapeMismatch(TmResnetError, ValueError):
    pass


class EmptyBatch(TmResnetError, ValueError):
    pass


class InvalidLabel(TmResnetError, ValueError):
    pass


class NotAScalar(TmResnetError, ValueError):
    pass


# network building


class InsufficientBlocks(TmResnetError, ValueError):
    pass


class ConfigError(TmResnetError, ValueError):
    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


# data and persistence


class FileMissing(TmResnetError, FileNotFoundError):
    pass


class TruncatedRecord(TmResnetError):
    pass


class LabelOutOfRange(TmResnetError):
    pass


class BadMagic(TmResnetError):
    pass


class DimensionMismatch(TmResnetError):
    pass


class UnsupportedVersion(TmResnetError):
    pass


class CorruptBlob(TmResnetError):
    pass
