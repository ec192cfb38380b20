"""Shared exception types."""


class DegenerateStepError(ValueError):
    """A sampling step pair whose endpoints have (numerically) equal alpha-bar.

    Raised instead of silently clamping: a near-zero denominator in the
    trigger-shift coefficient would corrupt the backdoor loss.
    """


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


class CheckpointError(RuntimeError):
    """Checkpoint cannot be loaded (version mismatch or failed integrity check)."""


class TrainingDiverged(RuntimeError):
    """A training loss became non-finite."""
