"""Exception types raised across the lab."""


class R2LabError(Exception):
    pass


class DimensionError(R2LabError, ValueError):
    pass


class DomainError(R2LabError, ValueError):
    pass


class NumericError(R2LabError, ArithmeticError):
    pass


class LabelIndexError(R2LabError, IndexError):
    pass


class FormatError(R2LabError, ValueError):
    """Malformed input file (bad magic, truncated payload)."""


class ConsistencyError(R2LabError, ValueError):
    pass


class CorruptionError(R2LabError, ValueError):
    """Checkpoint manifest disagrees with its blob."""


class ConfigError(R2LabError, ValueError):
    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)
