"""Shared error types with machine-readable reasons."""


class ValidationError(ValueError):
    """Input violates an operation precondition."""


class ChannelNotFoundError(RuntimeError):
    """No collision-free rays: the central channel is blocked or absent."""


class TroughDetectionError(RuntimeError):
    """Fewer than three distinguishable inter-lobe troughs."""


class IllConditionedFitError(RuntimeError):
    """Surface regression design matrix is rank deficient."""

    def __init__(self, condition: float):
        super().__init__(f"ill-conditioned fit: condition estimate {condition:.3e}")
        self.condition = condition


class UnreachableCutError(RuntimeError):
    """A trajectory cannot fit any workspace sphere."""


class CorrectionBoundError(RuntimeError):
    """Fine-tune correction magnitude at or above the allowed bound."""

    def __init__(self, magnitude: float, bound: float):
        super().__init__(
            f"correction exceeds bound: {magnitude:.3f} mm >= {bound:.3f} mm; re-register"
        )
        self.magnitude = magnitude
        self.bound = bound


class TrainingDivergedError(RuntimeError):
    """Non-finite loss during gradient descent."""

    def __init__(self, epoch: int):
        super().__init__(f"training diverged: non-finite loss at epoch {epoch}")
        self.epoch = epoch
