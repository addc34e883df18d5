"""Exception hierarchy shared by every kacflow module."""


class KacFlowError(Exception):
    """Base class for all kacflow errors."""


class ParameterError(KacFlowError, ValueError):
    """Invalid process parameters or schedules."""


class DomainError(KacFlowError, ValueError):
    """Evaluation requested outside a support or a time domain."""


class DegenerateLawError(KacFlowError):
    """The analytic law at t <= 0 is a point mass and has no density object."""


class ConsistencyError(KacFlowError):
    """An internal numerical consistency check failed."""


class ConfigError(KacFlowError, ValueError):
    """Bad experiment configuration."""


class TrainingError(KacFlowError):
    def __init__(self, message: str, trace=None):
        super().__init__(message)
        self.trace = list(trace) if trace is not None else []


class IntegrationError(KacFlowError):
    def __init__(self, message: str, last_node: int | None = None, last_time: float | None = None):
        super().__init__(message)
        self.last_node = last_node
        self.last_time = last_time


class StageError(KacFlowError):
    def __init__(self, message: str, reports=None, trace=None):
        super().__init__(message)
        self.reports = list(reports) if reports is not None else []
        self.trace = list(trace) if trace is not None else []


class CheckpointError(KacFlowError):
    """Checkpoint checksum or shape metadata mismatch."""
