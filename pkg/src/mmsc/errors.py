"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataFormatError -> 3,
NumericalError -> 4.
"""


class MMSCError(Exception):
    pass


class ConfigError(MMSCError, ValueError):
    pass


class DataFormatError(MMSCError, ValueError):
    pass


class NumericalError(MMSCError, FloatingPointError):
    pass


class DimensionError(MMSCError, ValueError):
    pass


class DegenerateInputError(MMSCError, ValueError):
    pass


class TapeError(MMSCError, RuntimeError):
    pass


class DeterminismError(MMSCError, RuntimeError):
    pass


class SamplingPoolError(MMSCError, ValueError):
    def __init__(self, message, pool_size):
        super().__init__(message)
        self.pool_size = pool_size


class CapacityError(MMSCError, ValueError):
    pass


class CoverageError(MMSCError, KeyError):
    def __init__(self, items):
        self.items = sorted(int(i) for i in items)
        super().__init__(f"items unknown to the model: {self.items}")

    def __str__(self):
        return self.args[0]


class IncompatibleCheckpointError(MMSCError, ValueError):
    pass
