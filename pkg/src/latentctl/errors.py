"""Exception types shared across the package."""


class LatentCtlError(Exception):
    """Base class for all package errors."""


class DimensionError(LatentCtlError, ValueError):
    """Nonpositive or incompatible spatial/channel dimensions."""


class ShapeError(LatentCtlError, ValueError):
    """Tensor shapes do not line up (channel or spatial mismatch)."""


class ClassIdError(LatentCtlError, ValueError):
    """Class id out of range or absent where required."""


class ConfigurationError(LatentCtlError, ValueError):
    """Invalid tap spec, discovery config, or experiment config."""


class TrainingDivergenceError(LatentCtlError, RuntimeError):
    """Loss became non-finite during training; carries the step index."""

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"training diverged at step {step}")


class ClassCoverageError(LatentCtlError, RuntimeError):
    """The dataset never produced a usable label map for the class."""


class NumericalRankError(LatentCtlError, RuntimeError):
    """Latent-to-feature regression is rank deficient."""


class EmptyBatchError(LatentCtlError, RuntimeError):
    """Every batch element was filtered out before loss evaluation."""


class ProtocolError(LatentCtlError, ValueError):
    """Evaluation protocol is degenerate (too few codes or edits)."""


class ConflictError(LatentCtlError, ValueError):
    """Edit specs overlap on the same class and block range."""


class IntegrityError(LatentCtlError, RuntimeError):
    """Artifact lineage mismatch (config or checkpoint hash)."""
