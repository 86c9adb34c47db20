"""Exception hierarchy shared across the package."""


class DefectYoloError(Exception):
    """Base class for all package errors."""


class ArgumentError(DefectYoloError, ValueError):
    pass


class DimensionError(DefectYoloError, ValueError):
    pass


class StateError(DefectYoloError, RuntimeError):
    pass


class AnnotationError(DefectYoloError, ValueError):
    """Malformed or out-of-range annotation content."""

    def __init__(self, message: str, line_no: int | None = None):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {message}" if line_no is not None else message)


class StrategyError(DefectYoloError, ValueError):
    pass


class InputError(DefectYoloError, ValueError):
    """An image could not be decoded."""


class TrainingError(DefectYoloError, RuntimeError):
    pass


class ConfigError(DefectYoloError, ValueError):
    pass


class GenerationError(DefectYoloError, ValueError):
    pass


class CheckpointError(DefectYoloError, ValueError):
    pass
