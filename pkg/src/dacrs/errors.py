"""Shared exception types."""


class ConfigError(ValueError):
    """Configuration or dimension mismatch."""


class NumericError(ArithmeticError):
    """Non-finite values encountered in a numeric computation."""
