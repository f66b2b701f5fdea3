import unittest
from decimal import Decimal, getcontext

import numpy as np
from parameterized import parameterized

from copaintlab.errors import ScheduleError, StepIndexError
from copaintlab.schedule import NoiseSchedule, ScheduleSpec, build_linear_schedule, evenly_spaced_steps, \
    sampling_schedule, subsequence
from copaintlabTests.useful_test_util import ExtendedTestCase


class BuildLinearScheduleTests(ExtendedTestCase):
    def test_build__SingleStep__ExactValues(self):
        # Arrange & Act
        schedule = build_linear_schedule(1, 0.5, 0.5)

        # Assert
        self.assertEqual(1, schedule.T)
        self.assertArrayEqual([0.0, 0.5], schedule.beta)
        self.assertArrayEqual([1.0, 0.5], schedule.alpha)
        self.assertArrayEqual([1.0, 0.5], schedule.alpha_bar)
        self.assertArrayEqual([0.0, 0.0], schedule.sigma)

    def test_build__ConstantBeta__AlphaBarIsPower(self):
        # Arrange
        b = 0.01

        # Act
        schedule = build_linear_schedule(50, b, b)

        # Assert
        self.assertArrayClose([(1.0 - b) ** t for t in range(51)], schedule.alpha_bar, rtol=1e-12)

    def test_build__StandardSchedule__AlphaBarMatchesExtendedPrecisionProduct(self):
        # Arrange
        getcontext().prec = 50
        start, end, steps = Decimal('1e-4'), Decimal('0.02'), 1000
        expected = Decimal(1)
        for i in range(steps):
            expected *= 1 - (start + (end - start) * i / (steps - 1))

        # Act
        schedule = build_linear_schedule(1000, 1e-4, 0.02)

        # Assert
        self.assertAlmostEqual(1.0, schedule.alpha_bar[1000] / float(expected), delta=1e-11)
        self.assertAlmostEqual(4.0358e-5, schedule.alpha_bar[1000], delta=1e-8)

    @parameterized.expand([
        ('Deterministic', 0.0),
        ('Intermediate', 0.5),
        ('DdpmMatched', 1.0),
    ])
    def test_build__AnyEta__InvariantsHold(self, _, eta):
        # Arrange & Act
        schedule = build_linear_schedule(200, 1e-4, 0.02, eta)

        # Assert
        self.assertEqual(1.0, schedule.alpha_bar[0])
        self.assertTrue(np.all(np.diff(schedule.alpha_bar) < 0.0))
        self.assertTrue(0.0 < schedule.alpha_bar[-1] < 1.0)
        self.assertArrayClose(1.0 - schedule.beta, schedule.alpha)
        self.assertEqual(0.0, schedule.sigma[1])
        self.assertTrue(np.all(schedule.sigma[1:] ** 2 <= 1.0 - schedule.alpha_bar[:-1] + 1e-15))

    def test_build__EtaOne__SigmaMatchesDdpmPosteriorVariance(self):
        # Arrange
        schedule = build_linear_schedule(1000, 1e-4, 0.02, 1.0)
        ab = schedule.alpha_bar

        # Act
        expected = schedule.beta[2:] * (1.0 - ab[1:-1]) / (1.0 - ab[2:])

        # Assert
        self.assertArrayClose(expected, schedule.sigma[2:] ** 2, rtol=1e-12)

    def test_build__EtaZero__AllSigmasZero(self):
        # Arrange & Act
        schedule = build_linear_schedule(100)

        # Assert
        self.assertArrayEqual(np.zeros(101), schedule.sigma)

    @parameterized.expand([
        ('ZeroSteps', 0, 1e-4, 0.02, 0.0),
        ('NegativeSteps', -3, 1e-4, 0.02, 0.0),
        ('BetaStartZero', 10, 0.0, 0.02, 0.0),
        ('BetaEndOne', 10, 1e-4, 1.0, 0.0),
        ('BetaStartAboveEnd', 10, 0.1, 0.02, 0.0),
        ('EtaAboveOne', 10, 1e-4, 0.02, 1.5),
        ('EtaNegative', 10, 1e-4, 0.02, -0.1),
    ])
    def test_build__InvalidParameters__RaisesScheduleError(self, _, T, beta_start, beta_end, eta):
        # Arrange & Act & Assert
        with self.assertRaises(ScheduleError):
            build_linear_schedule(T, beta_start, beta_end, eta)

    def test_arrays__Always__ReadOnly(self):
        # Arrange
        schedule = build_linear_schedule(10)

        # Act & Assert
        with self.assertRaises(ValueError):
            schedule.alpha_bar[3] = 0.5


class SubsequenceTests(ExtendedTestCase):
    def test_subsequence__IdentitySelection__SameSchedule(self):
        # Arrange
        source = build_linear_schedule(30, 1e-4, 0.02, 1.0)

        # Act
        schedule = subsequence(source, list(range(1, 31)))

        # Assert
        self.assertArrayEqual(source.alpha_bar, schedule.alpha_bar)
        self.assertArrayEqual(source.sigma, schedule.sigma)

    def test_subsequence__LastStepOnly__SingleStepSchedule(self):
        # Arrange
        source = build_linear_schedule(30)

        # Act
        schedule = subsequence(source, [30])

        # Assert
        self.assertEqual(1, schedule.T)
        self.assertEqual(source.alpha_bar[30], schedule.alpha_bar[1])
        self.assertEqual(30, schedule.model_step(1))

    def test_subsequence__EvenlySpacedSteps__AlphaBarIsLookup(self):
        # Arrange
        source = build_linear_schedule(1000, 1e-4, 0.02, 1.0)
        steps = evenly_spaced_steps(1000, 250)

        # Act
        schedule = subsequence(source, steps)

        # Assert
        self.assertEqual(250, schedule.T)
        self.assertArrayEqual(source.alpha_bar[steps], schedule.alpha_bar[1:])
        self.assertEqual((0, *steps), schedule.model_steps)
        self.assertEqual(0.0, schedule.sigma[1])

    def test_subsequence__EtaOne__SigmaRecomputedOverSelectedPairs(self):
        # Arrange
        source = build_linear_schedule(100, 1e-4, 0.02, 1.0)
        steps = [10, 40, 100]

        # Act
        schedule = subsequence(source, steps)

        # Assert
        ab_prev, ab = source.alpha_bar[40], source.alpha_bar[100]
        expected = np.sqrt((1.0 - ab_prev) / (1.0 - ab)) * np.sqrt(1.0 - ab / ab_prev)
        self.assertAlmostEqual(expected, schedule.sigma[3], delta=1e-15)

    @parameterized.expand([
        ('Empty', []),
        ('NotIncreasing', [5, 3, 10]),
        ('Repeated', [3, 3, 10]),
        ('ZeroIndex', [0, 10]),
        ('AboveT', [5, 11]),
        ('NotEndingAtT', [1, 2, 3]),
        ('NonInteger', [2.5, 10]),
    ])
    def test_subsequence__InvalidSteps__RaisesScheduleError(self, _, steps):
        # Arrange
        source = build_linear_schedule(10)

        # Act & Assert
        with self.assertRaises(ScheduleError):
            subsequence(source, steps)


class NoiseScheduleTests(ExtendedTestCase):
    def test_evenly_spaced_steps__250Of1000__EveryFourthStep(self):
        # Arrange & Act
        steps = evenly_spaced_steps(1000, 250)

        # Assert
        self.assertListEqual([4, 8, 12], steps[:3])
        self.assertEqual(1000, steps[-1])
        self.assertEqual(250, len(steps))

    def test_evenly_spaced_steps__MoreThanAvailable__RaisesScheduleError(self):
        # Arrange & Act & Assert
        with self.assertRaises(ScheduleError):
            evenly_spaced_steps(10, 11)

    def test_model_step__OutOfRange__RaisesStepIndexError(self):
        # Arrange
        schedule = build_linear_schedule(10)

        # Act & Assert
        with self.assertRaises(StepIndexError):
            schedule.model_step(11)

    def test_with_eta__Zero__SameAlphaBarNoSigma(self):
        # Arrange
        schedule = build_linear_schedule(50, eta=1.0)

        # Act
        deterministic = schedule.with_eta(0.0)

        # Assert
        self.assertArrayEqual(schedule.alpha_bar, deterministic.alpha_bar)
        self.assertArrayEqual(np.zeros(51), deterministic.sigma)
        self.assertEqual(0.0, deterministic.spec.eta)

    def test_from_alpha_bar__Values__PrependsConvention(self):
        # Arrange & Act
        schedule = NoiseSchedule.from_alpha_bar([0.36, 0.25])

        # Assert
        self.assertArrayEqual([1.0, 0.36, 0.25], schedule.alpha_bar)
        self.assertEqual(2, schedule.T)

    def test_from_alpha_bar__NotDecreasing__RaisesScheduleError(self):
        # Arrange & Act & Assert
        with self.assertRaises(ScheduleError):
            NoiseSchedule.from_alpha_bar([0.25, 0.36])

    def test_spec__SamplingSchedule__RebuildsIdenticalSchedule(self):
        # Arrange
        _, schedule = sampling_schedule(250, 1000, eta=1.0)

        # Act
        rebuilt = ScheduleSpec.from_dict(schedule.spec.to_dict()).build()

        # Assert
        self.assertEqual(schedule.spec, rebuilt.spec)
        self.assertArrayEqual(schedule.alpha_bar, rebuilt.alpha_bar)
        self.assertArrayEqual(schedule.sigma, rebuilt.sigma)

    def test_sampling_schedule__FullLength__ReturnsTrainingSchedule(self):
        # Arrange & Act
        train, schedule = sampling_schedule(100, 100)

        # Assert
        self.assertIs(train, schedule)


if __name__ == '__main__':
    unittest.main()
