import hashlib
import logging
from pathlib import Path
from typing import Union

import numpy as np

from copaintlab.denoiser.base import Denoiser
from copaintlab.errors import DimensionError, FormatError, NumericFailureError
from copaintlab.schedule import NoiseSchedule
from copaintlab.util import StepValidator, as_vector

logger = logging.getLogger(__name__)

MAX_CONDITION_NUMBER = 1e12


class GaussianWorld:
    """
    A Gaussian data distribution N(mean, cov) that stands in for the natural image prior p(X_0).
    """

    def __init__(self, mean: np.ndarray, cov: np.ndarray):
        """
        Creates a new GaussianWorld object.

        :param mean: The mean vector m of length N.
        :param cov: The symmetric positive-definite covariance matrix S of shape (N, N).
        """
        mean = as_vector(mean, name='mean')
        cov = np.array(cov, dtype=np.float64)
        n = mean.shape[0]
        if cov.shape != (n, n):
            raise DimensionError(f'cov must have shape ({n}, {n}), got {cov.shape}')
        if not np.array_equal(cov, cov.T):
            raise ValueError('cov must be symmetric')
        try:
            np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise ValueError('cov must be positive definite') from None

        self._mean = mean.copy()
        self._cov = cov
        self._mean.setflags(write=False)
        self._cov.setflags(write=False)

    @property
    def mean(self) -> np.ndarray:
        """ Gets the mean vector. """
        return self._mean

    @property
    def cov(self) -> np.ndarray:
        """ Gets the covariance matrix. """
        return self._cov

    @property
    def dim(self) -> int:
        """ Gets the dimension N. """
        return self._mean.shape[0]

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """
        Draws n samples.
        :return: An array of shape (n, N).
        """
        factor = np.linalg.cholesky(self._cov)
        z = rng.standard_normal((n, self.dim))
        return self._mean + z @ factor.T

    def to_text(self) -> str:
        """ Serializes the world as 'gaussian N', a mean line and N covariance rows. """
        lines = [f'gaussian {self.dim}', ' '.join(repr(float(v)) for v in self._mean)]
        lines.extend(' '.join(repr(float(v)) for v in row) for row in self._cov)
        return '\n'.join(lines) + '\n'

    @classmethod
    def from_text(cls, text: str) -> 'GaussianWorld':
        """ Parses the format written by to_text. """
        lines = [line for line in text.splitlines() if line.strip()]
        if not lines:
            raise FormatError('empty gaussian world file')
        header = lines[0].split()
        if len(header) != 2 or header[0] != 'gaussian':
            raise FormatError(f"expected header 'gaussian N', got {lines[0]!r}")
        try:
            n = int(header[1])
            rows = [[float(v) for v in line.split()] for line in lines[1:]]
        except ValueError as e:
            raise FormatError(f'malformed gaussian world file: {e}') from None
        if len(rows) != n + 1 or any(len(row) != n for row in rows):
            raise FormatError(f'expected a mean line and {n} covariance rows of {n} values')
        return cls(np.array(rows[0]), np.array(rows[1:]))

    def identifier(self) -> str:
        digest = hashlib.sha256(self.to_text().encode('ascii')).hexdigest()
        return f'gaussian:{digest[:16]}'


def mirror_pairs(n: int) -> np.ndarray:
    """
    Gets the mirror partner of every coordinate, i <-> n - 1 - i.
    :param n: An even dimension.
    """
    if n < 2 or n % 2 != 0:
        raise DimensionError(f'mirror pairing needs an even dimension, got {n}')
    return np.arange(n)[::-1].copy()


def mirror_world(n: int, rho: float = 0.95) -> GaussianWorld:
    """
    Creates the zero mean mirror world: unit variances and correlation rho between every
    coordinate and its mirror partner.

    :param n: An even dimension.
    :param rho: The mirror correlation in (-1, 1).
    """
    if not -1.0 < rho < 1.0:
        raise ValueError(f'rho must lie in (-1, 1), got {rho}')
    cov = np.eye(n)
    cov[np.arange(n), mirror_pairs(n)] = rho
    return GaussianWorld(np.zeros(n), cov)


def load_world(path: Union[str, Path]) -> GaussianWorld:
    return GaussianWorld.from_text(Path(path).read_text(encoding='ascii'))


def save_world(world: GaussianWorld, path: Union[str, Path]) -> None:
    Path(path).write_text(world.to_text(), encoding='ascii', newline='\n')


class GaussianDenoiser(Denoiser):
    """
    The exact MMSE denoiser E[X_0 | X_t = x] of a Gaussian world under the forward marginal
    q(X_t | X_0) = N(sqrt(alpha_bar_t) X_0, (1 - alpha_bar_t) I):

        f(x) = m + sqrt(alpha_bar_t) S (alpha_bar_t S + (1 - alpha_bar_t) I)^-1 (x - sqrt(alpha_bar_t) m)

    The Jacobian does not depend on x. All of them are computed on construction.
    """

    def __init__(self, world: GaussianWorld, schedule: NoiseSchedule):
        """
        Creates a new GaussianDenoiser object.

        :param world: The Gaussian data distribution.
        :param schedule: The schedule the denoiser is defined on.
        :raises NumericFailureError: If the system of a step is numerically singular.
        """
        super().__init__(dim=world.dim, schedule=schedule)
        self._world: GaussianWorld = world
        self._jacobians: np.ndarray = self._build_jacobians()

    def _build_jacobians(self) -> np.ndarray:
        alpha_bar = np.asarray(self.schedule.alpha_bar[1:])[:, None, None]
        cov = self._world.cov
        systems = alpha_bar * cov + (1.0 - alpha_bar) * np.eye(self.dim)
        conditions = np.linalg.cond(systems)
        singular = np.flatnonzero(~(conditions < MAX_CONDITION_NUMBER))
        if singular.size:
            t = int(singular[0]) + 1
            raise NumericFailureError(f'singular denoiser system at t={t} '
                                      f'(condition number {conditions[t - 1]:.3g})')
        # S A^-1 = (A^-1 S)^T since S and A are symmetric and commute
        solved = np.linalg.solve(systems, np.broadcast_to(cov, systems.shape))
        jacobians = np.sqrt(alpha_bar) * np.swapaxes(solved, 1, 2)
        jacobians.setflags(write=False)
        return jacobians

    @property
    def world(self) -> GaussianWorld:
        return self._world

    def jacobian(self, t: int) -> np.ndarray:
        """
        Gets J = sqrt(alpha_bar_t) S (alpha_bar_t S + (1 - alpha_bar_t) I)^-1.
        :param t: A step of the denoiser's schedule in [1, T].
        """
        t = StepValidator.validate_step(t, 1, self.schedule.T)
        return self._jacobians[t - 1]

    def _value(self, x: np.ndarray, t: int) -> np.ndarray:
        mean = self._world.mean
        return mean + self.jacobian(t) @ (x - np.sqrt(self.schedule.alpha_bar[t]) * mean)

    def _vjp(self, x: np.ndarray, t: int, v: np.ndarray) -> np.ndarray:
        return self.jacobian(t).T @ v

    def identifier(self) -> str:
        return self._world.identifier()
