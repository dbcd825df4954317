"""Exception hierarchy shared by every module."""


class VexflowError(Exception):
    """Base class for all library errors."""


class ConfigurationError(VexflowError):
    """Invalid user-supplied configuration (sizes, options, files)."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DegenerateDomainError(VexflowError):
    pass


class ResolutionError(VexflowError):
    """Grid too coarse for the requested construction."""


class CoverageError(VexflowError):
    pass


class BoundsError(VexflowError):
    """Exponent values outside the admissible range."""


class DataError(VexflowError):
    pass


class DimensionError(VexflowError):
    pass


class NumericalError(VexflowError):
    """An iterative method failed to converge."""


class SymmetryError(VexflowError):
    pass


class UnderResolvedKernelError(VexflowError):
    pass


class SupportLeakError(VexflowError):
    pass


class ContractError(VexflowError):
    pass


class DecompositionError(VexflowError):
    """A field that should be a discrete gradient is not one."""

    def __init__(self, message, misfit):
        self.misfit = misfit
        super().__init__(f"{message} (relative misfit {misfit:.3e})")


class StepFailure(VexflowError):
    """Nonlinear step did not converge; carries the residual history."""

    def __init__(self, message, history):
        self.history = list(history)
        super().__init__(f"{message}; try halving dt")


class DependencyError(VexflowError):
    pass
