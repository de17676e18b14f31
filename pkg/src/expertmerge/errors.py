"""Exception types shared across the package."""


class ExpertMergeError(Exception):
    """Base class for all package errors."""


class ArchiveError(ExpertMergeError, ValueError):
    """A tensor archive is malformed, inconsistent, or cannot be written."""

    def __init__(self, message: str, record: str | None = None):
        super().__init__(message if record is None else f"{record}: {message}")
        self.record = record


class ModuleMismatch(ExpertMergeError, ValueError):
    """Two weight collections disagree on module names or shapes."""

    def __init__(self, message: str, module: str | None = None):
        super().__init__(message if module is None else f"{module}: {message}")
        self.module = module


class ZeroUpdate(ExpertMergeError, ValueError):
    """The weight update is numerically zero; no expert can be extracted."""


class RankUnderflow(ExpertMergeError, ValueError):
    """The truncation rank would be zero."""


class RankDeficient(ExpertMergeError, ValueError):
    """A matrix that must have full column rank does not."""

    def __init__(self, message: str, deficiency: int):
        super().__init__(message)
        self.deficiency = deficiency


class NumericalError(ExpertMergeError, ArithmeticError):
    """A quantity left its valid range by more than the allowed rounding slack."""


class ValidationError(ExpertMergeError, ValueError):
    """A store, plan, or query violates a structural invariant."""

    def __init__(self, message: str, module: str | None = None):
        super().__init__(message if module is None else f"{module}: {message}")
        self.module = module
