from typing import Any, List, Optional, Sequence

import numpy as np

from copaintlab.errors import DimensionError, NumericFailureError, ScheduleError, StepIndexError


class StepValidator:
    """ Validator for time step indices and step index lists. """

    @classmethod
    def validate_step(cls, t: Any, low: int, high: int, name: str = 't') -> int:
        """
        Validates both type and value of a single step index.

        :param t: The step index.
        :param low: The smallest allowed index.
        :param high: The largest allowed index.
        :param name: The argument name used in error messages.
        :return: The step index as python int.
        """
        if isinstance(t, (bool, np.bool_)) or not isinstance(t, (int, np.integer)):
            raise TypeError(f'{name} must be integer, not {type(t).__name__}')
        if not low <= t <= high:
            raise StepIndexError(f'{name}={t} out of range [{low}, {high}]')
        return int(t)

    @classmethod
    def validate_step_list(cls, steps: Sequence[int], last: int) -> List[int]:
        """
        Validates a strictly increasing list of step indices in [1, last] that ends at last.

        :param steps: The step index list.
        :param last: The required final index.
        :return: The validated indices as list of python ints.
        """
        steps = list(steps)
        if len(steps) == 0:
            raise ScheduleError('step index list is empty')

        for i, step in enumerate(steps):
            if isinstance(step, (bool, np.bool_)) or not isinstance(step, (int, np.integer)):
                raise ScheduleError(f'step indices must be integers. '
                                    f'Found type {type(step).__name__} at position {i}')
            if not 1 <= step <= last:
                raise ScheduleError(f'step index {step} out of range [1, {last}] at position {i}')
            if i > 0 and step <= steps[i - 1]:
                raise ScheduleError(f'step indices must be strictly increasing at position {i}')

        if steps[-1] != last:
            raise ScheduleError(f'step index list must end at {last}, got {steps[-1]}')
        return [int(step) for step in steps]


def as_vector(x: Any, dim: Optional[int] = None, name: str = 'x') -> np.ndarray:
    """
    Converts the input into a one dimensional float64 array and checks its length.

    :param x: Any array like input.
    :param dim: The required length or None to accept any length.
    :param name: The argument name used in error messages.
    :return: A float64 numpy vector. A copy is made only if needed.
    """
    vector = np.asarray(x, dtype=np.float64)
    if vector.ndim != 1:
        raise DimensionError(f'{name} must be one dimensional, got shape {vector.shape}')
    if dim is not None and vector.shape[0] != dim:
        raise DimensionError(f'{name} has length {vector.shape[0]}, expected {dim}')
    return vector


def ensure_finite(value: Any, what: str, t: Optional[int] = None) -> None:
    """
    Raises a NumericFailureError if the value contains NaN or infinity.

    :param value: A scalar or array.
    :param what: Description of the value for the error message.
    :param t: The time step the value belongs to, if any.
    """
    if not np.all(np.isfinite(value)):
        where = f' at t={t}' if t is not None else ''
        raise NumericFailureError(f'non-finite {what}{where}')


def frozen_array(values: Any) -> np.ndarray:
    """ Returns a read-only float64 copy of the given values. """
    array = np.array(values, dtype=np.float64)
    array.setflags(write=False)
    return array
