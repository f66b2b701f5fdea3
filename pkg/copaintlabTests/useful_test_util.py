import unittest
from contextlib import contextmanager
from functools import lru_cache
from typing import Tuple

import numpy as np

from copaintlab.datasets import mirror_dataset
from copaintlab.denoiser import Denoiser, GaussianDenoiser, GaussianWorld, TrainingConfig, TrainingResult, \
    mirror_world, train_mlp
from copaintlab.schedule import NoiseSchedule, build_linear_schedule, sampling_schedule


class ExtendedTestCase(unittest.TestCase):
    @contextmanager
    def assertNotRaised(self, exc_type=Exception):
        try:
            yield None
        except exc_type as e:
            raise self.failureException(f'{type(e).__name__} (subclass of {exc_type.__name__}) raised')

    def assertArrayEqual(self, expected, actual):
        """ Asserts bitwise equality of two arrays. """
        expected, actual = np.asarray(expected), np.asarray(actual)
        if expected.shape != actual.shape or not np.array_equal(expected, actual):
            raise self.failureException(f'arrays differ:\n expected {expected}\n actual   {actual}')

    def assertArrayClose(self, expected, actual, rtol=1e-12, atol=0.0):
        expected, actual = np.asarray(expected, dtype=np.float64), np.asarray(actual, dtype=np.float64)
        if expected.shape != actual.shape or not np.allclose(actual, expected, rtol=rtol, atol=atol):
            raise self.failureException(f'arrays not close (rtol={rtol}, atol={atol}):\n'
                                        f' expected {expected}\n actual   {actual}')


class FixedDenoiser(Denoiser):
    """ A denoiser that ignores its input and always predicts the same X_0. """

    def __init__(self, x0: np.ndarray, schedule: NoiseSchedule):
        super().__init__(dim=len(x0), schedule=schedule)
        self.x0 = np.asarray(x0, dtype=np.float64)

    def _value(self, x, t):
        return self.x0.copy()

    def _vjp(self, x, t, v):
        return np.zeros_like(v)

    def identifier(self) -> str:
        return 'fixed'


class NanDenoiser(FixedDenoiser):
    def _value(self, x, t):
        return np.full(self.dim, np.nan)

    def _vjp(self, x, t, v):
        return np.full(self.dim, np.nan)


def random_spd(rng: np.random.Generator, n: int) -> np.ndarray:
    factor = rng.standard_normal((n, n))
    cov = factor @ factor.T / n + 0.1 * np.eye(n)
    return 0.5 * (cov + cov.T)


def random_world(rng: np.random.Generator, n: int) -> GaussianWorld:
    return GaussianWorld(0.3 * rng.standard_normal(n), random_spd(rng, n))


def mirror_setup(T: int = 250, eta: float = 0.0, n: int = 8) -> Tuple[GaussianWorld, NoiseSchedule, GaussianDenoiser]:
    """ Gets the mirror world (rho = 0.95), a T step sampling schedule and the exact denoiser. """
    world = mirror_world(n, 0.95)
    train, schedule = sampling_schedule(T, 1000, eta=eta)
    return world, schedule, GaussianDenoiser(world, train)


@lru_cache(maxsize=None)
def trained_mirror_mlp(dim: int = 16) -> TrainingResult:
    """ Trains the mirror MLP once per test process. """
    schedule = build_linear_schedule(1000)
    dataset = mirror_dataset(2048, dim, np.random.default_rng([7, 1]))
    return train_mlp(dataset, schedule, TrainingConfig(hidden=(64, 64), embed_dim=8, epochs=120, seed=7))


def central_difference(function, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """ Gets the central finite difference gradient of a scalar function. """
    grad = np.empty_like(x)
    for i in range(x.shape[0]):
        e = np.zeros_like(x)
        e[i] = step
        grad[i] = (function(x + e) - function(x - e)) / (2.0 * step)
    return grad
