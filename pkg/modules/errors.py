class QuantiPropError(Exception):
    """Base class for every error raised by the QuantiProp modules."""


class DomainError(QuantiPropError, ValueError):
    pass


class ValidationError(QuantiPropError, ValueError):
    pass


class NumericalError(QuantiPropError, ArithmeticError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})

    def __str__(self):
        base = super().__str__()
        if not self.diagnostics:
            return base
        details = ", ".join(f"{key}={value}" for key, value in self.diagnostics.items())
        return f"{base} ({details})"


class SingularMatrixError(NumericalError):
    pass


class NonConvergenceError(NumericalError):
    def __init__(self, message, last_iterate=None, diagnostics=None):
        super().__init__(message, diagnostics)
        self.last_iterate = last_iterate


class SiteUpdateError(NumericalError):
    def __init__(self, index, cause):
        super().__init__(f"Site {index} update failed: {cause}", getattr(cause, "diagnostics", None))
        self.index = index
        self.cause = cause


class TableError(QuantiPropError):
    pass


class SkipUpdate(QuantiPropError):
    """Raised when a cavity has nonpositive variance; the site is left as is for the sweep."""
