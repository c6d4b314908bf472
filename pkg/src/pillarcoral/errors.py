"""Exception hierarchy shared across the package."""


class PillarCoralError(Exception):
    """Base class for all errors raised by pillarcoral."""


class IoError(PillarCoralError, OSError):
    """A file could not be read or written."""


class FormatError(PillarCoralError, ValueError):
    """File contents or values violate the expected format."""


class ConfigError(PillarCoralError, ValueError):
    """An invalid configuration value or key."""


class OutOfRange(PillarCoralError, ValueError):
    """Points lie outside the configured grid range."""


class ShapeMismatch(PillarCoralError, ValueError):
    """Operand shapes are incompatible."""


# the two names are used interchangeably by different modules
DimensionMismatch = ShapeMismatch


class TooFewSamples(PillarCoralError, ValueError):
    """Covariance estimation needs at least two samples."""


class NotScalar(PillarCoralError, ValueError):
    """backward() was called on a non-scalar tensor."""


class DetachedTensor(PillarCoralError, ValueError):
    """The tensor was not produced by an operation recorded on the tape."""


class DomainError(PillarCoralError, ValueError):
    """A frame carries the wrong domain tag for the requested operation."""


class EmptyDataset(PillarCoralError, ValueError):
    """A dataset with no frames was passed where frames are required."""


class CheckpointMismatch(PillarCoralError, ValueError):
    """A checkpoint does not match the network configuration."""


class FrameMismatch(PillarCoralError, ValueError):
    """Prediction frame ids do not align with the dataset."""


class NumericalDivergence(PillarCoralError, ArithmeticError):
    """Training produced a non-finite loss."""
