"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration problems exit 2,
numeric failures exit 3.
"""


class PriocommError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(PriocommError):
    """Invalid configuration: bad field value, shape mismatch, unknown preset."""


class InputError(PriocommError):
    """Caller passed data that violates an operation's preconditions."""


class NumericError(PriocommError):
    """A computation produced or received a non-finite value."""


class ProtocolError(PriocommError):
    """The communication protocol was violated (e.g. duplicate senders)."""


class CheckpointError(PriocommError):
    """A checkpoint file is missing, corrupt, or incompatible with the config."""
