from abc import ABC, abstractmethod

import numpy as np

from copaintlab.schedule import NoiseSchedule
from copaintlab.util import StepValidator, as_vector


class Denoiser(ABC):
    """
    An abstract base class for the one-step generation f^(t): the prediction of X_0 from a noisy
    state X_t, together with vector-Jacobian products for gradient based optimization.

    The step t of value and vjp is a step of the denoiser's own schedule. Samplers that run on a
    sub-grid translate their steps with NoiseSchedule.model_step.

    Each subclass has to implement _value and _vjp. Denoisers are immutable after construction,
    so value and vjp are safe for concurrent calls.
    """

    def __init__(self, dim: int, schedule: NoiseSchedule):
        """
        Creates a new Denoiser object.

        :param dim: The state dimension N.
        :param schedule: The schedule the denoiser is defined on.
        """
        if dim < 1:
            raise ValueError(f'dim must be positive, got {dim}')
        self._dim: int = int(dim)
        self._schedule: NoiseSchedule = schedule

    @property
    def dim(self) -> int:
        """ Gets the state dimension N. """
        return self._dim

    @property
    def schedule(self) -> NoiseSchedule:
        """ Gets the schedule the denoiser is defined on. """
        return self._schedule

    def value(self, x: np.ndarray, t: int) -> np.ndarray:
        """
        Predicts X_0 from the state x at step t.

        :param x: The state vector of length dim.
        :param t: A step of the denoiser's schedule in [1, T].
        :return: The X_0 estimate.
        """
        x = as_vector(x, self.dim)
        t = StepValidator.validate_step(t, 1, self.schedule.T)
        return self._value(x, t)

    def vjp(self, x: np.ndarray, t: int, v: np.ndarray) -> np.ndarray:
        """
        Computes J^T v where J is the Jacobian of value(., t) at x.

        :param x: The state vector of length dim.
        :param t: A step of the denoiser's schedule in [1, T].
        :param v: The cotangent vector of length dim.
        :return: The transpose-Jacobian product.
        """
        x = as_vector(x, self.dim)
        v = as_vector(v, self.dim, name='v')
        t = StepValidator.validate_step(t, 1, self.schedule.T)
        return self._vjp(x, t, v)

    @abstractmethod
    def _value(self, x: np.ndarray, t: int) -> np.ndarray:
        """ Computes the X_0 estimate for validated inputs. """
        pass

    @abstractmethod
    def _vjp(self, x: np.ndarray, t: int, v: np.ndarray) -> np.ndarray:
        """ Computes the transpose-Jacobian product for validated inputs. """
        pass

    @abstractmethod
    def identifier(self) -> str:
        """ Gets a string that identifies the denoiser in run manifests. """
        pass
