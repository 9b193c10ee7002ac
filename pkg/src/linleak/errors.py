"""Exception hierarchy shared across the package."""


class LinleakError(Exception):
    """Base class for all package errors."""


class ConfigError(LinleakError):
    """Invalid configuration; ``fields`` maps field names to diagnostics."""

    def __init__(self, message, fields=None):
        super().__init__(message)
        self.fields = dict(fields or {})

    def __str__(self):
        base = super().__str__()
        if not self.fields:
            return base
        detail = "; ".join(f"{k}: {v}" for k, v in sorted(self.fields.items()))
        return f"{base} ({detail})"


class BudgetExceeded(ConfigError):
    pass


# data loading
class DataFormatError(LinleakError):
    pass


class BadMagic(DataFormatError):
    pass


class TruncatedFile(DataFormatError):
    pass


class DimensionMismatch(DataFormatError):
    pass


# model construction / evaluation
class DegenerateCalibration(LinleakError):
    pass


class LayoutOverflow(LinleakError):
    pass


class LayoutMismatch(LinleakError):
    pass


class ShapeMismatch(LinleakError, ValueError):
    pass


# secure aggregation
class MissingSeed(LinleakError):
    pass


class CountMismatch(LinleakError):
    pass
