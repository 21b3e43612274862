"""Exception types shared across the package."""


class AnchorSyncError(Exception):
    """Base class for all library errors."""


class InvalidInputError(AnchorSyncError):
    """An operation received arguments violating its preconditions."""


class ValidationError(AnchorSyncError):
    """A data file (manifest, description bank, config) failed validation."""


class TrainingDivergedError(AnchorSyncError):
    """Training produced a non-finite loss and was aborted."""
