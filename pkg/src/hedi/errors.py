"""Exception types raised across the pipeline.

Each error maps to one CLI exit code through ``exit_code``: domain rejections
exit 1, I/O problems exit 2 and numerical divergence exits 3.
"""


class HediError(Exception):
    exit_code = 1


# -- I/O -----------------------------------------------------------------------

class IoFailure(HediError, OSError):
    exit_code = 2


class UnsupportedFormat(IoFailure):
    pass


class CorruptHeader(IoFailure):
    pass


class TruncatedData(IoFailure):
    pass


class MalformedRow(IoFailure):
    pass


class DuplicateId(IoFailure):
    pass


# -- domain --------------------------------------------------------------------

class EmptyMask(HediError, ValueError):
    pass


class InvalidSpacing(HediError, ValueError):
    pass


class GridMismatch(HediError, ValueError):
    pass


class EmptyInput(HediError, ValueError):
    pass


class OutOfBounds(HediError, ValueError):
    pass


class DegenerateGrid(HediError, ValueError):
    pass


class EmptySurface(HediError, ValueError):
    pass


class MissingChannel(HediError, KeyError):
    pass


class BothZero(HediError, ValueError):
    pass


class ZeroDefectArea(HediError, ValueError):
    pass


class EmptyLandmarkSet(HediError, ValueError):
    pass


class InvalidSpec(HediError, ValueError):
    pass


class InvalidConfig(HediError, ValueError):
    pass


class ReportInvariantError(HediError, ValueError):
    pass


# -- numerical -----------------------------------------------------------------

class DivergenceDetected(HediError, RuntimeError):
    exit_code = 3


class InversionDiverged(HediError, RuntimeError):
    exit_code = 3
