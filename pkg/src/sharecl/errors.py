"""Exception hierarchy shared by every module."""


class ShareError(Exception):
    """Base class for all errors raised by sharecl."""

    exit_code = 2
    kind = "error"


class NumericFailure(ShareError):
    """A numerical kernel failed (non-convergence, non-finite result)."""

    exit_code = 3
    kind = "numeric"

    def __init__(self, message, shape=None):
        super().__init__(message)
        self.shape = shape


class IllConditionedError(NumericFailure):
    """A basis is (numerically) rank deficient."""

    def __init__(self, message, layer_id=None, shape=None):
        super().__init__(message, shape=shape)
        self.layer_id = layer_id


class DegenerateInputError(NumericFailure, ValueError):
    """Input carries no signal for the requested computation (e.g. all zeros)."""


class TrainingFailure(NumericFailure):
    """Gradient descent diverged."""

    def __init__(self, message, last_finite_loss=None):
        super().__init__(message)
        self.last_finite_loss = last_finite_loss


class ConsistencyError(ShareError, ValueError):
    """Shapes, layers or task names do not agree."""

    kind = "validation"

    def __init__(self, message, layer_id=None):
        super().__init__(message)
        self.layer_id = layer_id


class RankError(ShareError, ValueError):
    """Requested number of factors exceeds the achievable rank."""

    kind = "validation"

    def __init__(self, message, achievable_k=None):
        super().__init__(message)
        self.achievable_k = achievable_k


class FormatError(ShareError):
    """A file is not a valid SHRX container or config."""

    kind = "format"


class CorruptionError(FormatError):
    """A container is truncated or its offsets are inconsistent."""

    def __init__(self, message, offset=None, expected=None):
        super().__init__(message)
        self.offset = offset
        self.expected = expected


class ValidationError(FormatError, ValueError):
    """Loaded data violates a model invariant."""

    kind = "validation"

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field
