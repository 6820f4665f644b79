"""Exception types shared across the package."""


class AdaptiveBpError(Exception):
    """Base class for package errors."""


class ConfigError(AdaptiveBpError):
    """Invalid configuration value; message names the offending field."""


class InputError(AdaptiveBpError):
    """Invalid runtime input (e.g. token id out of vocabulary range)."""


class ProfilingError(AdaptiveBpError):
    """Graph cannot be profiled (unknown tensor kind, structure mismatch)."""


class NumericError(AdaptiveBpError):
    """Non-finite values encountered where finite ones are required."""


class InfeasibleBudgetError(AdaptiveBpError):
    """The FLOPs budget cannot cover even the forward pass."""


class VerificationError(AdaptiveBpError):
    """An internal cross-check (oracle suite) failed."""
