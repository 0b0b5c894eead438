"""Exception types raised across the pipeline."""


class LidarPmsError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(LidarPmsError):
    """An input file does not follow the expected binary or raster layout."""


class CalibrationError(LidarPmsError):
    """Calibration content is missing or physically invalid."""


class MissingKeyError(CalibrationError, KeyError):
    def __init__(self, key: str, path=None):
        self.key = key
        where = f" in {path}" if path is not None else ""
        super().__init__(f"calibration key {key!r} not found{where}")

    def __str__(self) -> str:
        return self.args[0]


class DimensionError(LidarPmsError, ValueError):
    """Two arrays that must share a shape do not."""


class DegenerateNormalError(LidarPmsError, ValueError):
    """A plane normal is too close to the image plane to define a disparity plane."""


class EmptyEvaluationError(LidarPmsError):
    """No pixel is valid in both the estimate and the ground truth."""


class ConfigError(LidarPmsError):
    """Pipeline configuration is inconsistent."""


class PipelineError(LidarPmsError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")
