"""Exception types raised across the pipeline.

Each class name doubles as the error name reported by the command line.
"""


class HeadfieldError(Exception):
    """Base class for all library errors."""


class NonPositiveDepth(HeadfieldError):
    pass


class PixelOutOfBounds(HeadfieldError):
    pass


class InvalidRay(HeadfieldError):
    pass


class DimensionMismatch(HeadfieldError):
    pass


class EmptyCoverage(HeadfieldError):
    pass


class Diverged(HeadfieldError):
    pass


class DegenerateJacobian(HeadfieldError):
    pass


class EmptyMask(HeadfieldError):
    pass


class NonFiniteLoss(HeadfieldError):
    pass


class CorruptCheckpoint(HeadfieldError):
    pass


class ConfigMismatch(HeadfieldError):
    pass


class ManifestInvalid(HeadfieldError):
    pass


class DegenerateConfiguration(HeadfieldError):
    pass


class EmptySet(HeadfieldError):
    pass
