"""Exception hierarchy shared by every module."""


class HardNegError(ValueError):
    """Base class for all library errors."""


class DegenerateInputError(HardNegError):
    """A vector is too close to zero to be projected onto the sphere."""


class InvalidConfigError(HardNegError):
    pass


class ShapeError(HardNegError):
    pass


class InvalidBatchError(HardNegError):
    pass


class InvalidDistributionError(HardNegError):
    pass


class EmptySupportError(HardNegError):
    """A restricted distribution has no points to put mass on."""


class BoundInvalidError(HardNegError):
    """The generalization bound's denominator is not positive."""


class HypothesisViolationError(HardNegError):
    """An input violates an assumption the theory relies on."""


class UsageError(HardNegError):
    pass
