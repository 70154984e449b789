from typing import Any, Optional

from app.constants import EXIT_LAB_ERROR

class LabError(Exception):
    """Base exception for laboratory errors"""
    def __init__(self, message: str, exit_code: int = EXIT_LAB_ERROR):
        self.message = message
        self.exit_code = exit_code
        super().__init__(self.message)

class ParameterError(LabError):
    """Exception for out-of-range numeric parameters"""
    def __init__(self, message = "Invalid parameter"):
        super().__init__(message)

class InputShapeError(LabError):
    """Exception for batches whose inputs do not fit the model"""
    def __init__(self, expected, actual):
        self.expected = tuple(expected)
        self.actual = tuple(actual)
        super().__init__(f"Expected inputs of shape {self.expected}, got {self.actual}")

class EmptyBatchError(LabError):
    """Exception for operations that need at least one example"""
    def __init__(self, message = "Batch is empty"):
        super().__init__(message)

class BatchTooSmallError(LabError):
    """Exception for metrics that need more examples than were given"""
    def __init__(self, minimum: int, actual: int):
        super().__init__(f"Batch needs at least {minimum} examples, got {actual}")

class InvalidPartitionError(LabError):
    """Exception for index sets that do not partition the batch"""
    def __init__(self, message = "Index sets must be disjoint and cover the batch"):
        super().__init__(message)

class BundleMismatchError(LabError):
    """Exception for gradient bundles that belong to different models"""
    def __init__(self, message = "Gradient bundles do not share parameter names and shapes"):
        super().__init__(message)

class MaskMismatchError(LabError):
    """Exception for subsample masks built for another model"""
    def __init__(self, message = "Subsample mask does not match the gradient"):
        super().__init__(message)

class PartitionError(LabError):
    """Exception for client partitions that cannot be built"""
    def __init__(self, message = "Cannot partition dataset"):
        super().__init__(message)

class SamplingError(LabError):
    """Exception for client batches that cannot be sampled"""
    def __init__(self, message = "Cannot sample client batch"):
        super().__init__(message)

class AggregationError(LabError):
    """Exception for client updates that cannot be aggregated"""
    def __init__(self, message = "Cannot aggregate client updates"):
        super().__init__(message)

class InapplicableError(LabError):
    """Exception for metrics that do not apply to the model"""
    def __init__(self, message = "Metric is not applicable to this model"):
        super().__init__(message)

class FixtureError(LabError):
    """Exception for crafted models that miss their target factor"""
    def __init__(self, achieved: float, required: float):
        self.achieved = achieved
        self.required = required
        super().__init__(f"Crafted model reached factor {achieved:.4g}, needs {required:.4g}")

class MeasurementError(LabError):
    """Exception for images a measurement cannot evaluate"""
    def __init__(self, message = "Image cannot be measured"):
        super().__init__(message)

class PropertyError(LabError):
    """Exception for inconsistent property specifications"""
    def __init__(self, message = "Invalid property"):
        super().__init__(message)

class DimensionMismatchError(LabError):
    """Exception for decoder inputs or targets of the wrong size"""
    def __init__(self, expected: int, actual: int, what: str = "input"):
        super().__init__(f"Decoder {what} has size {actual}, expected {expected}")

class BatchRejectedError(LabError):
    """Exception signalling that a training batch has to be skipped"""
    def __init__(self, message = "Batch rejected", iterations: int = 0):
        self.iterations = iterations
        super().__init__(message)

class DivergenceError(LabError):
    """Exception for training runs whose loss became non-finite"""
    def __init__(self, epoch: int, step: int, artifact: Optional[Any] = None):
        self.epoch = epoch
        self.step = step
        self.artifact = artifact
        super().__init__(f"Training diverged at epoch {epoch}, step {step}")

class ArchitectureMismatchError(LabError):
    """Exception for checkpoints used with another architecture"""
    def __init__(self, message = "Checkpoint does not match the model architecture"):
        super().__init__(message)

class ArtifactError(LabError):
    """Exception for unreadable or malformed artifacts"""
    def __init__(self, message = "Malformed artifact"):
        super().__init__(message)

class DatasetError(LabError):
    """Exception for datasets that cannot be loaded or are empty"""
    def __init__(self, message = "Dataset unavailable"):
        super().__init__(message)
