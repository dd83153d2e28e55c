"""Exception hierarchy. The CLI maps these onto exit codes."""


class Res3DError(Exception):
    """Base class for all package errors."""


class ConfigurationError(Res3DError, ValueError):
    """Invalid layer, architecture or run configuration."""


class DimensionError(Res3DError, ValueError):
    """Tensor shapes do not line up."""


class StatisticsError(Res3DError, ValueError):
    """Too few values to compute batch statistics."""


class DataError(Res3DError):
    """Dataset, manifest or frame-file problem."""


class NumericError(Res3DError, ArithmeticError):
    """Non-finite loss or gradient during training."""


class CheckpointError(Res3DError):
    """Checkpoint file cannot be used."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass
