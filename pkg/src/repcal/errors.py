"""Exception and warning types shared across the package."""


class RepcalError(Exception):
    """Base class for all errors raised by this package."""


class DimensionMismatchError(RepcalError):
    """Layer/input dimensions do not chain; message names the offending layer."""


class DegenerateSpecError(RepcalError):
    """A network produced a (numerically) constant output where variation is required."""


class InvalidSpecError(RepcalError):
    """A network spec violates a structural invariant."""


class InvalidLawError(RepcalError):
    """An input law violates a structural invariant."""


class InsufficientSamplesError(RepcalError):
    """Fewer training points than cells requested."""


class PartitionParseError(RepcalError):
    """Malformed partition/predictor/spec file; message carries the offending path."""


class UnsupportedVersionError(PartitionParseError):
    """Serialized object has a version this code does not read."""


class IllConditionedError(RepcalError):
    """Second-moment matrix too ill-conditioned to invert reliably."""

    def __init__(self, condition):
        self.condition = float(condition)
        super().__init__(f"second-moment matrix condition number {self.condition:.3e} exceeds limit")


class MissingTruthError(RepcalError):
    """Operation requires ground-truth probabilities that the dataset lacks."""


class ConfigError(RepcalError):
    """Experiment configuration invalid; message names the field."""


class RankDeficientWarning(UserWarning):
    """Stacked coefficient matrix has a vanishing r-th singular value (diversity failure)."""


class NearSingularGammaWarning(UserWarning):
    """Estimated link-derivative mean is near zero; direction recovery is unreliable."""


class NonConvergenceWarning(UserWarning):
    """Iterative patcher hit its iteration cap before exhausting violations."""
