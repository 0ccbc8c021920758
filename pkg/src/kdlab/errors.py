"""Exception hierarchy.

The CLI maps these onto exit codes: ConfigError -> 1, DataError -> 2,
everything else derived from KDLabError -> 3.
"""


class KDLabError(Exception):
    pass


class ShapeError(KDLabError, ValueError):
    pass


class ConfigError(KDLabError, ValueError):
    def __init__(self, field, reason):
        self.field = field
        self.reason = reason
        super().__init__(f"{field}: {reason}")


class DataError(KDLabError):
    pass


class TruncatedFileError(DataError):
    pass


class ChecksumError(DataError):
    pass


class CheckpointError(DataError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class LengthMismatchError(CheckpointError):
    pass


class DivergenceError(KDLabError, RuntimeError):
    def __init__(self, epoch, step, value):
        self.epoch = epoch
        self.step = step
        self.value = value
        super().__init__(f"non-finite loss {value!r} at epoch {epoch}, step {step}")


class DegenerateProjectionError(KDLabError, ValueError):
    pass


class InfeasibleError(KDLabError):
    def __init__(self, message, best_cell=None):
        self.best_cell = best_cell
        super().__init__(message)
