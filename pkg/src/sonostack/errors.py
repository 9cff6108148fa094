"""Exception hierarchy shared across the package."""


class SonostackError(Exception):
    """Base class for domain errors raised by this package."""


class DecodeError(SonostackError):
    pass


class UnsupportedFormat(SonostackError):
    pass


class InvalidLength(SonostackError, ValueError):
    pass


class FilterbankError(SonostackError, ValueError):
    pass


class ConfigError(SonostackError, ValueError):
    pass


class StackError(SonostackError, ValueError):
    pass


class ShapeError(SonostackError, ValueError):
    pass


class DegenerateBatch(SonostackError, ValueError):
    pass


class CheckpointError(SonostackError):
    pass


class DatasetError(SonostackError):
    pass


class PipelineError(SonostackError):
    pass
