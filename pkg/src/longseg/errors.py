"""Exception hierarchy shared by all longseg modules."""


class LongsegError(Exception):
    """Base class for every error raised by this package."""


class FormatError(LongsegError):
    pass


class TruncationError(FormatError):
    pass


class DataError(LongsegError):
    pass


class UnsupportedError(LongsegError):
    pass


class DegenerateMeshError(LongsegError):
    pass


class GradientUndefinedError(LongsegError):
    pass


class NumericError(LongsegError):
    def __init__(self, message, class_id=None):
        super().__init__(message)
        self.class_id = class_id


class EmptyClassError(LongsegError):
    def __init__(self, message, class_ids=()):
        super().__init__(message)
        self.class_ids = tuple(class_ids)


class InvalidPriorError(LongsegError):
    pass


class ConfigError(LongsegError):
    pass


class SpecError(LongsegError):
    pass


class InputError(LongsegError):
    pass


class UndefinedMetricError(LongsegError):
    pass


class FitError(LongsegError):
    def __init__(self, message, trace=None, timepoint=None):
        super().__init__(message)
        self.trace = list(trace or [])
        self.timepoint = timepoint
