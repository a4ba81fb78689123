"""Exception hierarchy shared across the package."""


class StackpropError(Exception):
    """Base class for all package errors."""


class CorpusError(StackpropError):
    """Malformed input data or an invalid gold tree."""


class UnrollError(StackpropError):
    """The static oracle cannot produce a derivation for a sentence."""


class ModelError(StackpropError):
    """Corrupt, truncated, or incompatible model file."""


class ConfigError(StackpropError):
    """Unusable configuration or command-line arguments."""
