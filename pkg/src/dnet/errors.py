"""Exception hierarchy shared by every dnet module."""


class DNetError(Exception):
    """Base class for all library errors."""


class DimensionError(DNetError, ValueError):
    """Tensor or array shapes are incompatible."""


class ParameterError(DNetError, ValueError):
    """An argument is outside its valid range."""


class GeometryError(DNetError, ValueError):
    """A point cloud is degenerate for the requested operation."""


class ParseError(DNetError, ValueError):
    """A text file could not be parsed."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)


class StateError(DNetError, RuntimeError):
    """Optimizer or model state is inconsistent."""


class NumericError(DNetError, ArithmeticError):
    """A non-finite value appeared where finite values are required."""


class ConfigError(DNetError, ValueError):
    """A configuration is invalid or inconsistent with other inputs."""


class DatasetError(DNetError, OSError):
    """A dataset directory or manifest is missing or malformed."""


class CheckpointError(DNetError):
    """Base class for checkpoint load/save failures."""


class CheckpointFormatError(CheckpointError):
    """The file does not start with the checkpoint magic bytes."""


class CheckpointVersionError(CheckpointError):
    """The checkpoint format version is not supported."""


class CheckpointTruncatedError(CheckpointError):
    """The file ended before the declared content was read."""


class CheckpointMismatchError(CheckpointError, ConfigError):
    """Stored tensors or config disagree with the requested model config."""
