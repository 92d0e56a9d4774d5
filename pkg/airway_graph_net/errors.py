# errors.py


class AgnError(Exception):
    """Base class for every error raised by airway_graph_net."""


class ShapeError(AgnError, ValueError):
    pass


class ConfigError(AgnError, ValueError):
    pass


class FormatError(AgnError, ValueError):
    """Raised for malformed volume, checkpoint or config files."""


class DataError(AgnError, ValueError):
    pass


class TrainingError(AgnError, RuntimeError):
    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration
