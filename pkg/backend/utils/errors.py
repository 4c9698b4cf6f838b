"""
Errors Module
Exception hierarchy shared by the pipeline and the command line
"""


class TrimodalError(Exception):
    """Base class for every error raised by the pipeline"""

    exit_code = 3


class ConfigError(TrimodalError, ValueError):
    """Configuration is invalid or incomplete"""

    exit_code = 2


class InvalidShapeError(TrimodalError, ValueError):
    """Operand shapes are incompatible"""


class InvalidBatchError(TrimodalError, ValueError):
    """Batch is too small or inconsistent across modalities"""


class DegenerateInputError(TrimodalError, ValueError):
    """Input has no direction to normalize (zero vector)"""


class InvalidLengthError(TrimodalError, ValueError):
    """Signal or clip is shorter than the requested window"""


class InvalidShiftError(TrimodalError, ValueError):
    """Frequency shift exceeds the number of mel bins"""


class ContractViolationError(TrimodalError, ValueError):
    """Inputs violate a documented precondition"""


class InvalidStepError(TrimodalError, ValueError):
    """Step index outside of the schedule"""


class PoisonedStepError(TrimodalError, RuntimeError):
    """Non-finite gradients or parameters; the optimizer step was aborted"""


class DataIntegrityError(TrimodalError, RuntimeError):
    """Checkpoint, blob or dataset on disk is missing or corrupt"""


class UnsupportedModalityError(TrimodalError, ValueError):
    """Modality is not available for the requested operation"""

    exit_code = 2


class UndefinedMetricError(TrimodalError, ValueError):
    """Metric is undefined for the given labels or value"""


class TapeError(TrimodalError, RuntimeError):
    """Backward called on a tensor that was not recorded on a tape"""
