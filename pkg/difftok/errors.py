class DifftokError(Exception):
    """Base error. `exit_code` is what the CLI exits with."""

    exit_code = 1

    def __init__(self, message: str, **details):
        super().__init__(message)
        self.message = message
        self.details = details

    def to_dict(self):
        return {'error': type(self).__name__, 'message': self.message, **self.details}


class ConfigError(DifftokError):
    exit_code = 2


class DataError(DifftokError):
    exit_code = 3


class ShapeError(DataError):
    pass


class ScheduleError(DataError):
    pass


class ChunkingError(DataError):
    pass


class CacheMismatchError(DataError):
    pass


class TensorFormatError(DataError):
    pass


class ClipLoadError(DataError):
    pass


class PerceptualWeightsError(DataError):
    pass


class CheckpointMismatchError(DataError):
    pass


class MetricError(DataError):
    pass


class NumericalError(DifftokError):
    exit_code = 4

    def __init__(self, message: str, term: str = None, **details):
        super().__init__(message, term=term, **details)
        self.term = term
