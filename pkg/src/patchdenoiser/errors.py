"""Exception types shared across the package.

The CLI maps these onto process exit codes: usage/config problems exit
with 2, data integrity problems with 3, training divergence with 4.
"""


class DenoiserError(Exception):
    """Base class for all package-specific errors."""


class UsageError(DenoiserError):
    """An argument or precondition violation by the caller."""


class ConfigError(UsageError):
    """An invalid or inconsistent configuration."""


class DimensionError(UsageError):
    """A shape mismatch; the message names the offending axis or dims."""


class IntegrityError(DenoiserError):
    """Stored data is corrupt, truncated, or internally inconsistent."""


class FormatError(IntegrityError):
    """A file or dataset does not follow the expected layout."""


class EmptyDatasetError(FormatError):
    """A dataset scan found no usable low/full dose pairs."""


class DivergedError(DenoiserError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, loss: float):
        self.epoch = epoch
        self.loss = loss
        super().__init__(f"training diverged at epoch {epoch}: loss={loss!r}")
