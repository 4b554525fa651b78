"""Exception types shared across the package."""


class DynasegError(Exception):
    """Base class for all package-specific errors."""


class InvalidClass(DynasegError):
    """Class id outside the registered range."""


class UnknownTissue(DynasegError):
    """Lookup of a tissue name that is not registered."""


class ShapeError(DynasegError):
    """Tensor or image shape violates an operation's contract."""


class NumericError(DynasegError):
    """Non-finite values where finite ones are required."""


class InvalidMask(DynasegError):
    """Mask contains values other than 0 and 1."""


class PoolClassError(DynasegError):
    """Sample pushed into a pool of a different class."""


class DataError(DynasegError):
    """Dataset is missing, empty, or inconsistent."""


class IncompleteValidation(DynasegError):
    """Validation history lacks a score for some class."""


class IncompleteEvaluation(DynasegError):
    """Test set lacks samples for some class."""


class InvalidInput(DynasegError):
    """Malformed input to an aggregation step."""


class InvalidLabel(DynasegError):
    """Label map contains an unregistered class id."""


class IoError(DynasegError):
    """Filesystem read or write failed."""


class ConfigError(DynasegError):
    """Run configuration failed validation."""


class CheckpointError(DynasegError):
    """Checkpoint incompatible with the requested configuration."""
