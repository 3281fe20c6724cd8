"""Exception taxonomy shared across the package."""


class GmlpError(Exception):
    """Base class for all package errors."""


class ShapeError(GmlpError):
    """Operand shapes are incompatible with the requested operation."""


class DomainError(GmlpError):
    """Numeric input outside an operation's domain (log of <=0, division by zero, non-finite data)."""


class GraphError(GmlpError):
    """Autodiff misuse: non-scalar loss, detached graph, or repeated backward on one tape."""


class ConfigError(GmlpError):
    """Invalid configuration value or architecture description."""


class DataError(GmlpError):
    """Malformed dataset input (bad CSV row, missing label column, label out of range)."""


class CheckpointError(GmlpError):
    """Unreadable or inconsistent checkpoint container."""


class TrainingDiverged(GmlpError):
    """Loss became non-finite; carries the epoch where it happened."""

    def __init__(self, epoch: int, value: float):
        super().__init__(f"non-finite loss ({value}) at epoch {epoch}")
        self.epoch = epoch
        self.value = value
