class CoPaintLabError(Exception):
    """
    Base error of the copaintlab library.
    Superclass of all error types raised by this library.
    More precise details must be taken from the individual error message.
    """
    pass


class ScheduleError(CoPaintLabError, ValueError):
    """
    This error is raised when a noise schedule cannot be built from the given parameters or
    when a step index list does not describe a valid sub-grid of a schedule.
    E.g. a beta value outside (0, 1) or a subsequence that does not end at T.
    """
    pass


class DimensionError(CoPaintLabError, ValueError):
    """
    This error is raised when vectors, reveal operators, observations or denoisers disagree in
    their dimensions.
    """
    pass


class ConfigError(CoPaintLabError, ValueError):
    """
    This error is raised for invalid hyperparameters, unknown presets or unknown keys in a
    config file.
    """
    pass


class NumericFailureError(CoPaintLabError, ArithmeticError):
    """
    This error is raised when a computation produces non-finite values or a linear solve is
    numerically singular.
    E.g. when the gradient descent of a sampler diverges at a time step.
    """
    pass


class FormatError(CoPaintLabError, ValueError):
    """
    This error is raised when a file does not follow the expected format.
    E.g. a checkpoint without the magic bytes or a mask file of the wrong length.
    """
    pass


class UnsupportedOperatorError(CoPaintLabError, TypeError):
    """
    This error is raised when a method is used with a reveal operator it cannot handle.
    E.g. coordinate-wise blending with an average pooling operator.
    """
    pass


class StepIndexError(CoPaintLabError, IndexError):
    """
    This error is raised when a time step index lies outside the range a schedule or an
    operation supports.
    E.g. asking a schedule with T = 250 for step 251.
    """
    pass
