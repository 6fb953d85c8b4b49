"""Exception hierarchy shared by every lesionforge module.

The CLI maps ConfigurationError/ValidationError to exit code 2 (bad input)
and every other LesionForgeError to exit code 1 (runtime failure).
"""


class LesionForgeError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(LesionForgeError):
    """Invalid or incomplete configuration: bad keys, missing paths, missing
    prerequisites (e.g. a synthetic regime without a translator checkpoint)."""


class ValidationError(LesionForgeError):
    """A value violates a documented contract (bad argument, broken invariant)."""


class PairingError(LesionForgeError):
    """Dataset images and masks could not be matched one-to-one."""

    def __init__(self, message: str, orphan_ids: tuple[str, ...] = ()):
        super().__init__(message)
        self.orphan_ids = orphan_ids


class DataIOError(LesionForgeError):
    """A file could not be read or written; the message names the path."""


class DegenerateOutputError(LesionForgeError):
    """An operation produced an unusable result, e.g. an empty mask."""


class EstimationError(LesionForgeError):
    """A statistical estimate is undefined for the given inputs."""


class NumericError(LesionForgeError):
    """A numeric quantity became non-finite; the message names the term."""


class CheckpointError(LesionForgeError):
    """A checkpoint or model file is malformed or has the wrong version."""
