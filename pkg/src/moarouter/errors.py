"""Shared exception types."""


class ShapeError(ValueError):
    """Operand dimensions are inconsistent."""


class ParameterError(ValueError):
    """An argument is outside its allowed range."""


class NumericError(ArithmeticError):
    """A computation produced a non-finite value."""


class DeserializationError(ValueError):
    """A serialized file is malformed; the message names the offending field."""


class ConfigError(ValueError):
    """A configuration document is invalid; the message names the location."""


class TrainingDivergedError(RuntimeError):
    """Training loss became non-finite at `step`."""

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"training diverged at step {step}")


class AgentUnavailableError(RuntimeError):
    """An agent could not produce an output (timeouts, bad responses, exhausted retries)."""

    def __init__(self, agent_id: str, message: str = ""):
        self.agent_id = agent_id
        super().__init__(message or f"agent '{agent_id}' unavailable")
