"""Exception hierarchy. Each family carries a distinct process exit code."""


class DepthVOError(Exception):
    exit_code = 1


class DataError(DepthVOError):
    """File / dataset ingestion problems."""
    exit_code = 2


class MissingCalibration(DataError):
    pass


class NonMonotonicNames(DataError):
    pass


class UnreadableImage(DataError):
    pass


class BadMagic(DataError):
    pass


class SizeMismatch(DataError):
    pass


class NonPositiveValue(DataError):
    pass


class LengthMismatch(DataError):
    pass


class MissingDepthRaster(DataError):
    pass


class TrackingLost(DepthVOError):
    exit_code = 3


class SolverError(DepthVOError):
    exit_code = 4


class SolverDiverged(SolverError):
    pass


class RankDeficient(SolverError):
    pass


class MapError(DepthVOError):
    exit_code = 5


class InsufficientTexture(MapError):
    pass


class EmptyMap(MapError):
    pass


class GeometryDomainError(DepthVOError):
    """Inputs outside the valid geometric domain of an operation."""
    exit_code = 6


class NonPositiveDepth(GeometryDomainError):
    pass


class NonPositiveInverseDepth(GeometryDomainError):
    pass


class OutOfBounds(GeometryDomainError):
    pass


class BehindCamera(GeometryDomainError):
    pass
