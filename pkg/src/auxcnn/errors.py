"""Exception types shared across the package."""


class AuxcnnError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(AuxcnnError):
    """Tensor shapes inconsistent with an operation or builder contract."""


class GraphError(AuxcnnError):
    """Malformed computation graph (bad node reference, missing output, cycle)."""


class UninitializedParameterError(AuxcnnError):
    """A graph was run before its trainable weights were initialized."""


class NumericError(AuxcnnError):
    """Non-finite value detected; training must abort rather than continue."""


class ConfigError(AuxcnnError):
    """Invalid experiment configuration or config file."""


class DataError(AuxcnnError):
    """Dataset loading or format problem."""


class CheckpointError(AuxcnnError):
    """Corrupt checkpoint file or shape mismatch against the receiving model."""
