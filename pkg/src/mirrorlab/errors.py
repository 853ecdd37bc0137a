class ConfigError(ValueError):
    """Invalid configuration, shape mismatch, or unusable input file."""


class DivergenceError(RuntimeError):
    """Training produced non-finite values (NaN loss, NaN action, NaN log-prob)."""
