"""Exception types shared across the package."""


class PlayFusionError(Exception):
    """Base class for all package errors."""


class ConfigError(PlayFusionError, ValueError):
    """Invalid configuration value or combination."""


class ShapeError(PlayFusionError, ValueError):
    """Array shapes do not match the expected layout."""


class VocabularyError(PlayFusionError, KeyError):
    """Instruction id outside the closed vocabulary."""


class FormatError(PlayFusionError):
    """Base class for on-disk format problems."""


class VersionMismatchError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


class CheckpointMismatchError(PlayFusionError):
    """Checkpoint and requested configuration disagree (e.g. differing T_a)."""


class DivergenceError(PlayFusionError, FloatingPointError):
    """A training loss became non-finite."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class SplitLeakageError(PlayFusionError):
    """A held-out task appears in the training annotations."""
