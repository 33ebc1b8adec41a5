"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Bad user-supplied configuration."""


class NumericalError(RuntimeError):
    """Training produced a non-finite value."""


class DataError(ValueError):
    """Base class for input-file problems."""


class ParseError(DataError):
    pass


class IntegrityError(DataError):
    pass


class CompletenessError(DataError):
    pass


class CardinalityError(DataError):
    pass
