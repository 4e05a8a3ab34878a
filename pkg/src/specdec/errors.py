"""Exception hierarchy shared across the package.

Each class maps to a distinct CLI exit code (see cli.py), so keep them
disjoint rather than reusing ValueError everywhere.
"""


class SpecdecError(Exception):
    """Base class for all package errors."""


class ContractViolationError(SpecdecError, ValueError):
    """An operation was called with arguments outside its contract."""


class CapacityError(SpecdecError, RuntimeError):
    """A sequence or block would overflow the configured context window."""


class ConfigMismatchError(SpecdecError, ValueError):
    """Two artifacts (model, tree, table, plan, strategy) disagree on shapes."""


class InvalidTableError(SpecdecError, ValueError):
    """A head-accuracy table violates its probability constraints."""


class ContainerError(SpecdecError, RuntimeError):
    """Base class for weight-container parsing failures."""


class BadMagicError(ContainerError):
    """Container file does not start with the expected magic bytes."""


class TruncatedContainerError(ContainerError):
    """Container payload ends before a tensor's declared extent."""


class TensorShapeError(ContainerError):
    """A stored tensor's shape disagrees with the embedded model config."""
