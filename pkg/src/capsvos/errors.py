class CapsVOSError(Exception):
    """Base class for all library errors."""


class DimensionError(CapsVOSError, ValueError):
    pass


class ParameterError(CapsVOSError, ValueError):
    pass


class DomainError(CapsVOSError, ValueError):
    pass


class ContractError(CapsVOSError, ValueError):
    pass


class ConfigurationError(CapsVOSError, ValueError):
    pass


class NonFiniteLossError(CapsVOSError, RuntimeError):
    """Raised by training when a loss term stops being finite."""

    def __init__(self, stage, step, values):
        self.stage = stage
        self.step = step
        self.values = values
        super().__init__(f"non-finite loss at step {step} in stage {stage!r}: {values}")
