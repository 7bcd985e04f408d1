"""Exception hierarchy shared by all modules."""


class MVAdjointError(Exception):
    """Base class for every error raised by this package."""


class PreconditionError(MVAdjointError, ValueError):
    pass


class SelfIntersectionError(MVAdjointError, ValueError):
    pass


class NegativeVolume(MVAdjointError):
    """A grid cell has non-positive signed area."""

    def __init__(self, index, area=None):
        self.index = tuple(int(k) for k in index)
        self.area = area
        msg = f"non-positive cell volume at (i, j) = {self.index}"
        if area is not None:
            msg += f" (area {area:.3e})"
        super().__init__(msg)


class MeshFormatError(MVAdjointError, ValueError):
    pass


class NonPhysicalState(MVAdjointError):
    def __init__(self, index=None, message="non-physical state (rho <= 0 or p <= 0)"):
        self.index = index
        if index is not None:
            message = f"{message} at cell {tuple(int(k) for k in index)}"
        super().__init__(message)


class NotConverged(MVAdjointError):
    """Iteration budget exhausted; ``result`` carries the partial solution."""

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class PrimalNotConverged(MVAdjointError):
    pass


class DegenerateDenominator(MVAdjointError, ZeroDivisionError):
    pass


class DegenerateBaselineDelta(MVAdjointError, ZeroDivisionError):
    pass


class UnsupportedPrimitive(MVAdjointError, TypeError):
    pass


class SeedDimensionMismatch(MVAdjointError, ValueError):
    pass


class DimensionMismatch(MVAdjointError, ValueError):
    pass


class CovarianceNotPD(MVAdjointError):
    pass


class NoIntersection(MVAdjointError):
    pass


class STLFormatError(MVAdjointError, ValueError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(MVAdjointError, ValueError):
    pass


class MissingArtifact(MVAdjointError, FileNotFoundError):
    def __init__(self, path):
        super().__init__(f"missing run artifact: {path}")
        self.path = path


class EmptyRecordSet(MVAdjointError, ValueError):
    """A report was requested for a record set without usable samples."""
