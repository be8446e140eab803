"""Shared exception types."""


class ConfigError(ValueError):
    """A config key is unknown, mistyped, or violates a constraint."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


class InvalidTrajectory(ValueError):
    """A trajectory's token sequence is not valid for the policy's vocabulary."""


class EnvironmentMismatch(ValueError):
    """A trajectory was produced in a different environment than the one given."""


class DivergenceError(RuntimeError):
    """Training hit a non-finite quantity; carries the failing step index."""

    def __init__(self, step: int, what: str = "non-finite gradient"):
        super().__init__(f"{what} at step {step}")
        self.step = step


class DegenerateGroup(ValueError):
    """A group cannot drive the objective (e.g. no correct or no incorrect
    sequences for the decoupled objective); callers drop it like a
    zero-signal group."""
