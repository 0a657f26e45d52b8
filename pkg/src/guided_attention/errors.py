"""Exception hierarchy shared by every guided-attention module."""

from __future__ import annotations


class GuidedAttentionError(Exception):
    """Base class for all errors raised by this package."""

    exit_code: int = 1


class DimensionError(GuidedAttentionError, ValueError):
    """Raised when tensor shapes do not agree."""


class ConfigError(GuidedAttentionError, ValueError):
    """Raised for an invalid configuration value."""


class InputError(GuidedAttentionError, ValueError):
    """Raised for malformed user data (images, targets, token lists)."""

    exit_code = 2


class StateError(GuidedAttentionError, RuntimeError):
    """Raised when decoding state is inconsistent with the current step."""


class UsageError(GuidedAttentionError, RuntimeError):
    """Raised when an operation is called outside of its contract."""


class DataError(GuidedAttentionError, OSError):
    """Raised for missing or corrupt corpora, checkpoints and images."""

    exit_code = 2


class NumericError(GuidedAttentionError, ArithmeticError):
    """Raised when a NaN or infinity is detected in training."""

    exit_code = 3
