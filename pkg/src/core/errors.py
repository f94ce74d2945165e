"""Errors - Exception hierarchy shared by every simulator module"""


class MxSimError(Exception):
    """Base class for user-facing simulator errors"""


class ConfigurationError(MxSimError, ValueError):
    """Invalid knob value, dimension or orientation mismatch, or unmappable model"""


class SequenceTooLongError(ConfigurationError):
    """Token count exceeds the model's max_seq"""


class FileFormatError(MxSimError, ValueError):
    """Malformed MXT1/F64M payload or bundle JSON"""


class EmptyInputError(MxSimError, ValueError):
    """Empty calibration set or sweep range"""


class CalibrationMissingError(MxSimError):
    """Analog execution requested on a model that has no calibration"""

    def __init__(self, model_dir=None):
        where = f" for {model_dir}" if model_dir else ""
        super().__init__(
            f"No calibration found{where}. Run `mxsim calibrate <model_dir>` first."
        )
