"""Exception hierarchy shared by every module.

Each class carries an ``exit_code`` so the command line can map failures to
distinct process exit codes without a lookup table of its own.
"""


class PetSegError(Exception):
    exit_code = 1


class ValidationError(PetSegError):
    exit_code = 3


class GridMismatchError(PetSegError):
    """Two volumes that must share a voxel grid do not."""

    exit_code = 4


class NiftiError(PetSegError):
    exit_code = 5


class NiftiFormatError(NiftiError):
    pass


class UnsupportedDtypeError(NiftiError):
    pass


class TruncatedFileError(NiftiError):
    pass


class DimensionalityError(NiftiError):
    pass


class RangeError(PetSegError):
    """Data cannot be represented in the requested on-disk datatype."""

    exit_code = 6


class ConfigError(PetSegError):
    exit_code = 7


class ShapeError(PetSegError):
    exit_code = 8


class EmptyInputError(PetSegError):
    exit_code = 9


class InfeasibleSplitError(PetSegError):
    exit_code = 10
