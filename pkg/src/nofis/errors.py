class NofisError(Exception):
    """Base class for every error raised by the package."""


class InvalidArgumentError(NofisError, ValueError):
    pass


class InvalidStateError(NofisError, RuntimeError):
    pass


class NumericalOverflowError(NofisError, ArithmeticError):
    def __init__(self, message, *, layer_index=None):
        super().__init__(message)
        self.layer_index = layer_index


class TrainingDivergenceError(NofisError, RuntimeError):
    """Non-finite loss or gradient during training.

    Carries whatever context was available where the divergence was detected:
    the training step m, the epoch inside it, the optimizer step counter and the
    diagnostics collected so far.
    """
    def __init__(self, message, *, step=None, epoch=None, optimizer_step=None, diagnostics=None):
        super().__init__(message)
        self.step = step
        self.epoch = epoch
        self.optimizer_step = optimizer_step
        self.diagnostics = diagnostics if diagnostics is not None else []


class CheckpointFormatError(NofisError, ValueError):
    pass


class UnsupportedVersionError(CheckpointFormatError):
    pass


class CatalogError(NofisError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ''


class ScheduleError(NofisError, ValueError):
    pass


class ConvergenceError(NofisError, RuntimeError):
    pass


class ExtrapolationError(NofisError, RuntimeError):
    pass


class UnsupportedModeError(NofisError, ValueError):
    pass


class BudgetExceededError(NofisError, RuntimeError):
    def __init__(self, message, *, overage):
        super().__init__(message)
        self.overage = overage


class ConfigError(NofisError, ValueError):
    """Schema violation in a run config; `path` is the dotted field path."""
    def __init__(self, path, message):
        super().__init__('{}: {}'.format(path, message) if path else message)
        self.path = path
