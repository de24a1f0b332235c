"""Shared exception types."""


class DecoupleError(Exception):
    """Base class for all package errors."""


class ConfigError(DecoupleError, ValueError):
    """Invalid configuration or incompatible method/dataset combination."""


class DataError(DecoupleError, ValueError):
    """Malformed or contract-violating dataset content."""


class CheckpointError(DecoupleError, ValueError):
    """Unreadable, version-mismatched, or vocabulary-mismatched checkpoint."""


class FrozenParametersError(DecoupleError, RuntimeError):
    """Attempted in-place update of parameters flagged immutable."""


class OracleError(DecoupleError, ValueError):
    """Oracle check is infeasible or received an invalid instance."""


class VerificationError(DecoupleError, AssertionError):
    """An oracle-verified mathematical claim failed on a concrete instance."""
