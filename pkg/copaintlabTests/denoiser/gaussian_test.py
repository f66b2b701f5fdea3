import tempfile
import unittest
from decimal import Decimal, getcontext
from pathlib import Path
from unittest.mock import patch

import numpy as np
from parameterized import parameterized

from copaintlab.denoiser import Denoiser, GaussianDenoiser, GaussianWorld, load_world, mirror_pairs, mirror_world, \
    save_world
from copaintlab.errors import DimensionError, FormatError, StepIndexError
from copaintlab.oracle import posterior_mean
from copaintlab.schedule import NoiseSchedule, build_linear_schedule
from copaintlabTests.useful_test_util import ExtendedTestCase, central_difference, random_world


@patch.multiple(Denoiser, __abstractmethods__=set())
class DenoiserTests(unittest.TestCase):
    def test_init__NonPositiveDim__RaisesValueError(self):
        # Arrange & Act & Assert
        with self.assertRaises(ValueError):
            Denoiser(0, build_linear_schedule(10))

    def test_value__WrongLength__RaisesDimensionError(self):
        # Arrange
        denoiser = Denoiser(3, build_linear_schedule(10))

        # Act & Assert
        with self.assertRaises(DimensionError):
            denoiser.value(np.zeros(4), 1)

    def test_value__StepOutOfRange__RaisesStepIndexError(self):
        # Arrange
        denoiser = Denoiser(3, build_linear_schedule(10))

        # Act & Assert
        with self.assertRaises(StepIndexError):
            denoiser.value(np.zeros(3), 0)

    def test_vjp__NonIntegerStep__RaisesTypeError(self):
        # Arrange
        denoiser = Denoiser(3, build_linear_schedule(10))

        # Act & Assert
        with self.assertRaises(TypeError):
            denoiser.vjp(np.zeros(3), 1.0, np.zeros(3))


class GaussianWorldTests(ExtendedTestCase):
    def test_init__NotSymmetric__RaisesValueError(self):
        # Arrange & Act & Assert
        with self.assertRaises(ValueError):
            GaussianWorld(np.zeros(2), np.array([[1.0, 0.5], [0.4, 1.0]]))

    def test_init__NotPositiveDefinite__RaisesValueError(self):
        # Arrange & Act & Assert
        with self.assertRaises(ValueError):
            GaussianWorld(np.zeros(2), np.array([[1.0, 2.0], [2.0, 1.0]]))

    def test_init__WrongCovShape__RaisesDimensionError(self):
        # Arrange & Act & Assert
        with self.assertRaises(DimensionError):
            GaussianWorld(np.zeros(3), np.eye(2))

    def test_mirror_world__EightCoordinates__CorrelatesMirrorPairs(self):
        # Arrange & Act
        world = mirror_world(8, 0.95)

        # Assert
        self.assertEqual(0.95, world.cov[0, 7])
        self.assertEqual(0.95, world.cov[3, 4])
        self.assertEqual(0.0, world.cov[0, 1])
        self.assertArrayEqual(np.ones(8), np.diag(world.cov))

    def test_mirror_pairs__OddDimension__RaisesDimensionError(self):
        # Arrange & Act & Assert
        with self.assertRaises(DimensionError):
            mirror_pairs(5)

    def test_mirror_pairs__FourCoordinates__ReversedIndices(self):
        # Arrange & Act & Assert
        self.assertArrayEqual([3, 2, 1, 0], mirror_pairs(4))

    def test_save_world__Reloaded__SameMeanAndCov(self):
        # Arrange
        world = random_world(np.random.default_rng(3), 5)

        # Act
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'world.txt'
            save_world(world, path)
            loaded = load_world(path)

        # Assert
        self.assertArrayEqual(world.mean, loaded.mean)
        self.assertArrayEqual(world.cov, loaded.cov)
        self.assertEqual(world.identifier(), loaded.identifier())

    @parameterized.expand([
        ('Empty', ''),
        ('WrongHeader', 'world 2\n0 0\n1 0\n0 1\n'),
        ('MissingRow', 'gaussian 2\n0 0\n1 0\n'),
        ('NotANumber', 'gaussian 1\nzero\n1\n'),
    ])
    def test_from_text__Malformed__RaisesFormatError(self, _, text):
        # Arrange & Act & Assert
        with self.assertRaises(FormatError):
            GaussianWorld.from_text(text)


class GaussianDenoiserTests(ExtendedTestCase):
    def test_value__StandardWorldQuarterSignal__HalvesInput(self):
        # Arrange
        denoiser = GaussianDenoiser(GaussianWorld(np.zeros(3), np.eye(3)), NoiseSchedule.from_alpha_bar([0.25]))
        x = np.array([0.4, -1.2, 2.0])

        # Act
        actual = denoiser.value(x, 1)

        # Assert
        self.assertArrayClose(0.5 * x, actual, rtol=1e-15)

    def test_value__DeltaPrior__ReturnsMean(self):
        # Arrange
        world = GaussianWorld(np.array([1.0, 1.0]), 1e-12 * np.eye(2))
        denoiser = GaussianDenoiser(world, build_linear_schedule(100))

        # Act
        actual = [denoiser.value(np.array([3.0, -2.0]), t) for t in (1, 50, 100)]

        # Assert
        for value in actual:
            self.assertArrayClose([1.0, 1.0], value, rtol=0.0, atol=1e-6)

    def test_value__CorrelatedPair__MatchesExtendedPrecisionSolve(self):
        # Arrange
        getcontext().prec = 40
        rho, alpha_bar = Decimal('0.9'), Decimal('0.5')
        a, b = alpha_bar + (1 - alpha_bar), alpha_bar * rho
        det = a * a - b * b
        # A^-1 (1, 0) for A = [[a, b], [b, a]], then f = sqrt(alpha_bar) S A^-1 x
        u = (a / det, -b / det)
        expected = [float(alpha_bar.sqrt() * (u[0] + rho * u[1])), float(alpha_bar.sqrt() * (rho * u[0] + u[1]))]
        world = GaussianWorld(np.zeros(2), np.array([[1.0, 0.9], [0.9, 1.0]]))
        denoiser = GaussianDenoiser(world, NoiseSchedule.from_alpha_bar([0.5]))

        # Act
        actual = denoiser.value(np.array([1.0, 0.0]), 1)

        # Assert
        self.assertArrayClose(expected, actual, rtol=1e-14)
        self.assertArrayClose([0.52756, 0.39899], actual, rtol=0.0, atol=1e-5)

    def test_value__StandardWorld__ShrinksBySqrtAlphaBar(self):
        # Arrange
        schedule = build_linear_schedule(200)
        denoiser = GaussianDenoiser(GaussianWorld(np.zeros(4), np.eye(4)), schedule)
        x = np.random.default_rng(0).standard_normal(4)

        for t in (1, 17, 100, 200):
            # Act
            actual = denoiser.value(x, t)

            # Assert
            self.assertArrayClose(np.sqrt(schedule.alpha_bar[t]) * x, actual, rtol=0.0, atol=1e-12)

    def test_vjp__RandomInstances__MatchesFiniteDifferences(self):
        # Arrange
        rng = np.random.default_rng(11)
        schedule = build_linear_schedule(100)

        for _ in range(100):
            denoiser = GaussianDenoiser(random_world(rng, 4), schedule)
            x, v = rng.standard_normal(4), rng.standard_normal(4)
            t = int(rng.integers(1, 101))

            # Act
            actual = denoiser.vjp(x, t, v)

            # Assert
            expected = central_difference(lambda y: float(v @ denoiser.value(y, t)), x)
            self.assertTrue(np.all(np.abs(actual - expected) / (1.0 + np.abs(expected)) <= 1e-5))

    def test_value__RandomWorlds__EqualsOraclePosteriorMean(self):
        # Arrange
        rng = np.random.default_rng(5)
        schedule = build_linear_schedule(100)

        for n in (1, 2, 5, 9, 16):
            world = random_world(rng, n)
            denoiser = GaussianDenoiser(world, schedule)
            x = rng.standard_normal(n)
            t = int(rng.integers(1, 101))

            # Act
            actual = denoiser.value(x, t)

            # Assert
            expected = posterior_mean(world, schedule, x, t)
            self.assertArrayClose(expected, actual, rtol=1e-10, atol=1e-12)

    def test_jacobian__AfterConstruction__ReadOnlyAndUnchangedByCalls(self):
        # Arrange
        schedule = build_linear_schedule(50)
        world = random_world(np.random.default_rng(8), 3)
        denoiser = GaussianDenoiser(world, schedule)
        before = [denoiser.jacobian(t).copy() for t in range(1, 51)]

        # Act
        for t in (1, 25, 50):
            denoiser.value(np.ones(3), t)
            denoiser.vjp(np.ones(3), t, np.ones(3))

        # Assert
        for t in range(1, 51):
            jacobian = denoiser.jacobian(t)
            self.assertFalse(jacobian.flags.writeable)
            self.assertArrayEqual(before[t - 1], jacobian)
            system = schedule.alpha_bar[t] * world.cov + (1.0 - schedule.alpha_bar[t]) * np.eye(3)
            expected = np.sqrt(schedule.alpha_bar[t]) * world.cov @ np.linalg.inv(system)
            self.assertArrayClose(expected, jacobian, rtol=1e-10, atol=1e-12)

    def test_jacobian__StepZero__RaisesStepIndexError(self):
        # Arrange
        denoiser = GaussianDenoiser(mirror_world(4), build_linear_schedule(10))

        # Act & Assert
        with self.assertRaises(StepIndexError):
            denoiser.jacobian(0)

    def test_identifier__SameWorld__SameIdentifier(self):
        # Arrange
        schedule = build_linear_schedule(10)

        # Act
        first = GaussianDenoiser(mirror_world(4), schedule).identifier()
        second = GaussianDenoiser(mirror_world(4), schedule).identifier()

        # Assert
        self.assertEqual(first, second)
        self.assertTrue(first.startswith('gaussian:'))


if __name__ == '__main__':
    unittest.main()
