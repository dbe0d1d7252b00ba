"""Exception hierarchy shared across the package."""


class DiffractError(Exception):
    pass


class InvalidInputError(DiffractError, ValueError):
    """Bad data handed to an operation (shape, range, non-finite values)."""


class InvalidConfigError(DiffractError, ValueError):
    """A configuration value is outside its allowed range."""


class FormatError(DiffractError):
    """A dataset or checkpoint file is malformed or incompatible."""


class TrainingError(DiffractError):
    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class ConsistencyError(DiffractError):
    """An internal invariant (e.g. frozen weights) was violated."""


class InferenceError(DiffractError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace
