"""Exception hierarchy.

Three branches map onto the CLI exit-code contract: UsageError -> 1,
DataError -> 2, NumericalError -> 3.
"""


class VoxelgateError(Exception):
    """Base class for all errors raised by this package."""


class UsageError(VoxelgateError):
    """Bad configuration, arguments, or API misuse."""


class DataError(VoxelgateError):
    """Malformed, inconsistent, or out-of-contract input data."""


class NumericalError(VoxelgateError):
    """NaN/Inf or other numerical faults."""


# --- NIfTI ---------------------------------------------------------------

class BadMagic(DataError):
    pass


class UnsupportedDatatype(DataError):
    pass


class CorruptHeader(DataError):
    pass


class TruncatedData(DataError):
    pass


class ValueOverflow(DataError):
    pass


# --- VSEG1 containers / parameter stores ---------------------------------

class BadContainer(DataError):
    pass


class ManifestMismatch(DataError):
    pass


# --- volume pipeline ------------------------------------------------------

class NonFiniteInput(NumericalError):
    pass


class ShapeMismatch(DataError):
    pass


class EmptyContent(DataError):
    pass


class BoxOutOfRange(DataError):
    pass


class UnexpectedLabel(DataError):
    pass


class DuplicateIds(DataError):
    pass


# --- tensor core / model ---------------------------------------------------

class NonPositiveOutputExtent(DataError):
    pass


class IndivisibleExtent(DataError):
    pass


class InvalidRate(UsageError):
    pass


class NonScalarLoss(UsageError):
    pass


class InvalidConfig(UsageError):
    pass


# --- metrics / training -----------------------------------------------------

class LabelOutOfRange(DataError):
    pass


class EmptyDataset(DataError):
    pass


class MissingGradient(UsageError):
    pass


class NonFiniteLoss(NumericalError):
    pass


class SpecInfeasible(UsageError):
    pass


class SliceOutOfRange(UsageError):
    pass
