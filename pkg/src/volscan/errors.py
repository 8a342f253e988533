"""Exception types shared across the package."""


class VolscanError(Exception):
    """Base class for all errors raised by volscan."""


class ShapeError(VolscanError, ValueError):
    pass


class ConfigError(VolscanError, ValueError):
    pass


class SpecError(VolscanError, ValueError):
    """Invalid dataset-generation spec."""


class UninitializedStatsError(VolscanError, RuntimeError):
    pass


class EmptySequenceError(VolscanError, ValueError):
    pass


class ContractError(VolscanError, RuntimeError):
    """A method was called out of order (e.g. backward before forward)."""


class GradCheckError(VolscanError, ArithmeticError):
    def __init__(self, message, name=None, index=None):
        super().__init__(message)
        self.name = name
        self.index = index


class MetricError(VolscanError, ValueError):
    pass


class SplitError(VolscanError, ValueError):
    pass


class FormatError(VolscanError, ValueError):
    """Base for binary file format problems."""


class BadMagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncatedError(FormatError):
    """File shorter (or longer) than its header declares."""


class DimOverflowError(FormatError):
    pass


class ManifestMismatchError(FormatError):
    pass


class UnknownArchitectureError(FormatError):
    pass
