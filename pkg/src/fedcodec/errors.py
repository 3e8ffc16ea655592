"""Exception types shared across the package.

The CLI maps these onto process exit codes, so library code should raise
the most specific type that applies rather than bare ValueError when the
failure is about budgets, artifacts, or training health.
"""


class ConfigError(ValueError):
    """A config document is malformed, has unknown keys, or bad values."""


class InfeasibleBudgetError(ValueError):
    """The requested (eps, delta) target cannot be met by the mechanism."""


class MissingArtifactError(FileNotFoundError):
    """A referenced artifact (codec half, stats file) is absent or unusable."""


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite during an optimization loop.

    checkpoint, when present, holds the last parameter state that still
    produced a finite loss.
    """

    def __init__(self, message: str, step: int | None = None, checkpoint=None):
        super().__init__(message)
        self.step = step
        self.checkpoint = checkpoint


class PipelineStageError(RuntimeError):
    """A mechanism stage failed; carries the stage label for attribution."""

    def __init__(self, stage: str, message: str, client_id=None):
        detail = f"stage '{stage}'"
        if client_id is not None:
            detail += f", client {client_id}"
        super().__init__(f"{detail}: {message}")
        self.stage = stage
        self.client_id = client_id


class StatsFormatError(ValueError):
    """A serialized stats document failed to parse or validate."""
