class ContractError(ValueError):
    """Input violates an operation's shape/value contract."""


class ConfigError(ValueError):
    """Invalid configuration (module construction, run config, checkpoint)."""


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss."""
