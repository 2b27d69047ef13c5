"""Exception types and process exit codes shared across the package."""

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_INTERNAL = 3


class CtsevError(Exception):
    """Base class for every error this package raises deliberately."""


class GeometryError(CtsevError):
    """Voxel geometry is unusable (non-positive spacing, bad grid rank)."""


class InputError(CtsevError):
    """Structurally valid inputs that do not fit together (dims, pairing)."""


class FormatError(CtsevError):
    """A file (QLV header/payload, CSV, model JSON) violates its format."""


class SchemaError(FormatError):
    """Column or field layout does not match what the consumer requires."""


class SpecError(CtsevError):
    """A phantom or cohort specification is internally inconsistent."""


class DegenerateError(CtsevError):
    """The operation's result is undefined on this input (empty lung,
    zero-weight histogram, single-class truth, zero-variance differences)."""


class TrainingError(CtsevError):
    """The training set cannot support the requested fit."""


class StratificationError(CtsevError):
    """Labels cannot be partitioned at the requested granularity."""
