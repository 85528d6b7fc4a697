"""Exception taxonomy shared across the package."""


class SoftrecError(Exception):
    """Base class for all package errors."""


class ShapeError(SoftrecError):
    """Operand shapes do not conform to a primitive's rules."""

    def __init__(self, primitive, *shapes):
        self.primitive = primitive
        self.shapes = shapes
        super().__init__(f"{primitive}: incompatible shapes {' vs '.join(map(str, shapes))}")


class ContractError(SoftrecError):
    """A caller violated an operation's precondition."""


class StateError(SoftrecError):
    """Required mutable state (e.g. gradients) is missing."""


class NumericError(SoftrecError):
    """A computed buffer contains NaN or Inf."""


class LengthError(SoftrecError):
    """A token sequence exceeds the model's maximum length."""


class IngestError(SoftrecError):
    """An input file is malformed or internally inconsistent."""


class FilterError(SoftrecError):
    """Minimum-interaction filtering removed the entire dataset."""


class SplitError(SoftrecError):
    """A chronological split produced an empty partition."""


class SpecError(SoftrecError):
    """A synthetic dataset specification is invalid."""


class DatasetError(SoftrecError):
    """A derived dataset is unusable (e.g. every generation empty)."""


class DegenerateStartError(SoftrecError):
    """Initial generation distance is zero; the curriculum has nothing to schedule."""


class TrainingDivergedError(SoftrecError):
    """Training loss became non-finite. Carries the last good model."""

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


class CheckpointError(SoftrecError):
    """A checkpoint file is unreadable or incompatible with the requested model."""


class ConfigError(SoftrecError):
    """A run configuration file failed validation."""


class ComparisonError(SoftrecError):
    """Runs being compared were produced from different datasets."""


class PlotError(SoftrecError):
    """Plotting was requested on empty or unusable metrics."""


class StageError(SoftrecError):
    """A pipeline stage cannot start or failed while running."""
