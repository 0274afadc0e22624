"""Exception and warning types shared across the package."""


class FactorIntError(Exception):
    """Base class for all package errors. ``type(e).__name__`` is the error code."""


class ConstantRow(FactorIntError):
    def __init__(self, row: int, label: str | None = None):
        self.row = row
        self.label = label
        tag = f" ({label})" if label else ""
        super().__init__(f"row {row}{tag} has zero variance and cannot be standardized")


class InvalidFactorCount(FactorIntError):
    pass


class SpecConflict(FactorIntError):
    pass


class CholeskyFailure(FactorIntError):
    pass


class ShapeMismatch(FactorIntError):
    pass


class InvalidFraction(FactorIntError):
    pass


class AllRemoved(FactorIntError):
    def __init__(self, group: str):
        self.group = group
        super().__init__(f"seed group {group} lost all of its genes during cleaning")


class InsufficientDraws(FactorIntError):
    pass


class FormatVersionMismatch(FactorIntError):
    def __init__(self, found: int, expected: int):
        self.found = found
        self.expected = expected
        super().__init__(f"file format version {found}, this build reads version {expected}")


class CorruptFile(FactorIntError):
    pass


class ConfigError(FactorIntError):
    pass


class EmptyWindowWarning(UserWarning):
    """A genomic window matched no probes; the result is an empty set."""
