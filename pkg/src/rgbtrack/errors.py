class ContractError(ValueError):
    """An operation was called outside its preconditions."""


class DimensionError(ContractError):
    pass


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    """Malformed or inconsistent on-disk data, boxes or result files."""
