"""
Exception hierarchy shared by every module.

main.py turns these into exit codes:
    ConfigError / ContractError -> 2, DataError -> 3, NumericError -> 4
"""


class SkyFlowError(Exception):
    """Base class for all errors raised on purpose by this package."""


class ConfigError(SkyFlowError):
    """Invalid configuration, parameters or model spec."""


class DimensionError(ConfigError):
    """Shape mismatch. The message names the offending axis."""


class DegenerateStatisticsError(ConfigError):
    """Batch statistics computed over fewer than two elements."""


class ContractError(SkyFlowError):
    """An API precondition was violated by the caller."""


class DataError(SkyFlowError):
    """A dataset or checkpoint file cannot be used."""


class FormatError(DataError):
    """Wrong magic bytes or unsupported version."""


class IntegrityError(DataError):
    """Payload ended before the header said it would."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class NumericError(SkyFlowError):
    """Training produced a non-finite loss."""

    def __init__(self, message, step=None, lr=None, history=None):
        super().__init__(message)
        self.step = step
        self.lr = lr
        self.history = list(history or [])
