import unittest

import numpy as np
from parameterized import parameterized

from copaintlab.denoiser import GaussianDenoiser, GaussianWorld
from copaintlab.errors import StepIndexError
from copaintlab.sampler import ddim_sample, ddim_step, ddim_trajectory, ddim_update, estimate_x0, estimate_x0_vjp, \
    forward_sample, multistep_grid, rollout_deterministic, rollout_deterministic_vjp, time_travel
from copaintlab.schedule import NoiseSchedule, build_linear_schedule, sampling_schedule, subsequence
from copaintlabTests.useful_test_util import ExtendedTestCase, FixedDenoiser, central_difference, mirror_setup, \
    random_world

DRAWS = 100_000


def transition_matrix(schedule: NoiseSchedule, denoiser: GaussianDenoiser, t: int, s: int) -> np.ndarray:
    """ The deterministic DDIM step t -> s of a zero mean Gaussian world as a matrix. """
    ab, ab_prev = schedule.alpha_bar[t], schedule.alpha_bar[s]
    k = np.sqrt(1.0 - ab_prev) / np.sqrt(1.0 - ab)
    c = np.sqrt(ab_prev) - k * np.sqrt(ab)
    return c * denoiser.jacobian(schedule.model_step(t)) + k * np.eye(denoiser.dim)


class ForwardSampleTests(ExtendedTestCase):
    def test_forward_sample__StepZero__ReturnsCopy(self):
        # Arrange
        schedule = build_linear_schedule(10)
        x0 = np.array([0.1, -0.2])

        # Act
        actual = forward_sample(schedule, x0, 0, np.random.default_rng(0))

        # Assert
        self.assertArrayEqual(x0, actual)
        self.assertIsNot(x0, actual)

    def test_forward_sample__ZeroInput__ScaledNoise(self):
        # Arrange
        schedule = build_linear_schedule(10)
        z = np.random.default_rng(4).standard_normal(3)

        # Act
        actual = forward_sample(schedule, np.zeros(3), 7, np.random.default_rng(4))

        # Assert
        self.assertArrayClose(np.sqrt(1.0 - schedule.alpha_bar[7]) * z, actual, rtol=1e-15)

    def test_forward_sample__ManyDraws__MatchesMarginalLaw(self):
        # Arrange
        schedule = build_linear_schedule(100)
        rng = np.random.default_rng(1)
        x0, t = np.array([0.7, -0.4]), 60
        ab = schedule.alpha_bar[t]

        # Act
        draws = np.array([forward_sample(schedule, x0, t, rng) for _ in range(DRAWS)])

        # Assert
        variance = 1.0 - ab
        self.assertTrue(np.all(np.abs(draws.mean(axis=0) - np.sqrt(ab) * x0) <= 4.0 * np.sqrt(variance / DRAWS)))
        self.assertTrue(np.all(np.abs(draws.var(axis=0) - variance) <= 4.0 * variance * np.sqrt(2.0 / DRAWS)))

    def test_forward_sample__StepAboveT__RaisesStepIndexError(self):
        # Arrange
        schedule = build_linear_schedule(10)

        # Act & Assert
        with self.assertRaises(StepIndexError):
            forward_sample(schedule, np.zeros(2), 11, np.random.default_rng(0))


class DdimStepTests(ExtendedTestCase):
    def test_ddim_step__NoiselessInputExactDenoiser__FollowsSignalRay(self):
        # Arrange
        schedule = NoiseSchedule.from_alpha_bar([0.36, 0.25])
        x0 = np.array([0.5, -1.0, 0.25])
        denoiser = FixedDenoiser(x0, schedule)

        # Act
        result = ddim_step(schedule, denoiser, 0.5 * x0, 2, None)

        # Assert
        self.assertArrayClose(0.6 * x0, result.x_prev, rtol=1e-15)

    def test_ddim_step__ZeroSigma__StateIsMean(self):
        # Arrange
        world, schedule, denoiser = mirror_setup(T=50)
        x = np.random.default_rng(0).standard_normal(8)

        # Act
        result = ddim_step(schedule, denoiser, x, 30, None)

        # Assert
        self.assertArrayEqual(result.mu_tilde, result.x_prev)

    def test_ddim_step__StandardWorld__ScalarRecursion(self):
        # Arrange
        schedule = build_linear_schedule(50)
        denoiser = GaussianDenoiser(GaussianWorld(np.zeros(3), np.eye(3)), schedule)
        x = np.array([1.0, -0.5, 2.0])

        for t in range(1, 51):
            ab, ab_prev = schedule.alpha_bar[t], schedule.alpha_bar[t - 1]
            c = np.sqrt(ab_prev * ab) + np.sqrt((1.0 - ab_prev) * (1.0 - ab))

            # Act
            result = ddim_step(schedule, denoiser, x, t, None)

            # Assert
            self.assertArrayClose(c * x, result.x_prev, rtol=1e-12)

    def test_ddim_update__PositiveSigma__AddsScaledNoise(self):
        # Arrange
        schedule = build_linear_schedule(20, eta=1.0)
        x, x0_hat = np.array([0.3, 0.1]), np.array([0.2, -0.2])
        z = np.random.default_rng(5).standard_normal(2)

        # Act
        result = ddim_update(schedule, x, 10, x0_hat, np.random.default_rng(5))

        # Assert
        self.assertArrayClose(result.mu_tilde + schedule.sigma[10] * z, result.x_prev, rtol=1e-15)

    def test_ddim_trajectory__DeterministicSchedule__BitReproducible(self):
        # Arrange
        world, schedule, denoiser = mirror_setup(T=100)
        x_start = np.random.default_rng(2).standard_normal(8)

        # Act
        first = ddim_trajectory(schedule, denoiser, x_start, None)
        second = ddim_trajectory(schedule, denoiser, x_start, None)

        # Assert
        self.assertEqual(100, len(first))
        self.assertArrayEqual(first[-1].x_prev, second[-1].x_prev)

    def test_ddim_sample__SameSeed__SameSample(self):
        # Arrange
        world, schedule, denoiser = mirror_setup(T=50, eta=1.0)

        # Act
        first = ddim_sample(schedule, denoiser, np.random.default_rng(8))
        second = ddim_sample(schedule, denoiser, np.random.default_rng(8))

        # Assert
        self.assertArrayEqual(first, second)


class RolloutTests(ExtendedTestCase):
    def test_rollout__StartAtOne__EqualsDenoiserValue(self):
        # Arrange
        world, schedule, denoiser = mirror_setup(T=50)
        x = np.random.default_rng(3).standard_normal(8)

        # Act
        actual = rollout_deterministic(schedule, denoiser, x, 1)

        # Assert
        self.assertArrayEqual(denoiser.value(x, schedule.model_step(1)), actual)

    def test_rollout__DeltaPrior__ReturnsMean(self):
        # Arrange
        schedule = build_linear_schedule(30)
        m = np.array([0.2, -0.1, 0.4])
        denoiser = FixedDenoiser(m, schedule)

        # Act
        actual = rollout_deterministic(schedule, denoiser, np.array([5.0, 1.0, -3.0]), 30)

        # Assert
        self.assertArrayEqual(m, actual)

    def test_rollout__GaussianWorld__EqualsMatrixProduct(self):
        # Arrange
        rng = np.random.default_rng(6)
        world = GaussianWorld(np.zeros(4), random_world(rng, 4).cov)
        train, schedule = sampling_schedule(40, 1000, eta=1.0)
        denoiser = GaussianDenoiser(world, train)
        x = rng.standard_normal(4)
        product = np.eye(4)
        for t in range(40, 0, -1):
            product = transition_matrix(schedule, denoiser, t, t - 1) @ product

        # Act
        actual = rollout_deterministic(schedule, denoiser, x, 40)

        # Assert
        self.assertArrayClose(product @ x, actual, rtol=1e-9, atol=1e-12)

    def test_rollout_vjp__GaussianWorld__EqualsTransposedProduct(self):
        # Arrange
        rng = np.random.default_rng(7)
        world = GaussianWorld(np.zeros(4), random_world(rng, 4).cov)
        train, schedule = sampling_schedule(25, 1000)
        denoiser = GaussianDenoiser(world, train)
        x, v = rng.standard_normal(4), rng.standard_normal(4)
        product = np.eye(4)
        for t in range(25, 0, -1):
            product = transition_matrix(schedule, denoiser, t, t - 1) @ product

        # Act
        actual = rollout_deterministic_vjp(schedule, denoiser, x, 25, v)

        # Assert
        self.assertArrayClose(product.T @ v, actual, rtol=1e-9, atol=1e-12)


class EstimateX0Tests(ExtendedTestCase):
    @parameterized.expand([
        ('Ten4', 10, 4, [10, 7, 4, 1]),
        ('Single', 6, 1, [6]),
        ('MoreStepsThanAvailable', 3, 5, [3, 2, 1]),
        ('StartAtOne', 1, 3, [1]),
    ])
    def test_multistep_grid__Values__EvenlySpacedDescending(self, _, t, H, expected):
        # Arrange & Act
        actual = multistep_grid(t, H)

        # Assert
        self.assertListEqual(expected, actual)

    def test_estimate_x0__OneStep__IdenticalToDenoiserValue(self):
        # Arrange
        world, schedule, denoiser = mirror_setup(T=50)
        x = np.random.default_rng(1).standard_normal(8)

        # Act
        actual = estimate_x0(schedule, denoiser, x, 37, 1)

        # Assert
        self.assertArrayEqual(denoiser.value(x, schedule.model_step(37)), actual)

    def test_estimate_x0__DeltaPrior__ReturnsMeanForEveryH(self):
        # Arrange
        schedule = build_linear_schedule(30)
        m = np.array([0.5, 0.5])
        denoiser = FixedDenoiser(m, schedule)

        for H in range(1, 6):
            # Act
            actual = estimate_x0(schedule, denoiser, np.array([1.0, -1.0]), 30, H)

            # Assert
            self.assertArrayEqual(m, actual)

    def test_estimate_x0__FiveSteps__EqualsRolloutOnSubGrid(self):
        # Arrange
        world, schedule, denoiser = mirror_setup(T=100)
        x = np.random.default_rng(9).standard_normal(8)
        grid = multistep_grid(100, 5)
        restricted = subsequence(schedule, sorted(grid))

        # Act
        actual = estimate_x0(schedule, denoiser, x, 100, 5)

        # Assert
        self.assertArrayEqual(rollout_deterministic(restricted, denoiser, x, restricted.T), actual)

    @parameterized.expand([
        ('OneStep', 1),
        ('ThreeSteps', 3),
    ])
    def test_estimate_x0_vjp__RandomInstance__MatchesFiniteDifferences(self, _, H):
        # Arrange
        rng = np.random.default_rng(12)
        world, schedule, denoiser = mirror_setup(T=50)
        x, v = rng.standard_normal(8), rng.standard_normal(8)

        # Act
        actual = estimate_x0_vjp(schedule, denoiser, x, 40, H, v)

        # Assert
        expected = central_difference(lambda y: float(v @ estimate_x0(schedule, denoiser, y, 40, H)), x)
        self.assertTrue(np.all(np.abs(actual - expected) / (1.0 + np.abs(expected)) <= 1e-5))


class TimeTravelTests(ExtendedTestCase):
    def test_time_travel__ZeroState__ScaledNoise(self):
        # Arrange
        schedule = build_linear_schedule(50)
        z = np.random.default_rng(2).standard_normal(3)
        ratio = schedule.alpha_bar[30] / schedule.alpha_bar[20]

        # Act
        actual = time_travel(schedule, np.zeros(3), 20, 10, np.random.default_rng(2))

        # Assert
        self.assertArrayClose(np.sqrt(1.0 - ratio) * z, actual, rtol=1e-15)

    def test_time_travel__TwoPaths__SameLaw(self):
        # Arrange
        schedule = build_linear_schedule(100)
        x0, t, tau = np.array([0.5, -0.8]), 30, 10
        rng_direct, rng_composed = np.random.default_rng(13), np.random.default_rng(14)

        # Act
        direct = np.array([forward_sample(schedule, x0, t + tau, rng_direct) for _ in range(DRAWS)])
        composed = np.array([time_travel(schedule, forward_sample(schedule, x0, t, rng_composed), t, tau, rng_composed)
                             for _ in range(DRAWS)])

        # Assert
        variance = 1.0 - schedule.alpha_bar[t + tau]
        mean_bound = 4.0 * np.sqrt(2.0 * variance / DRAWS)
        variance_bound = 4.0 * variance * np.sqrt(4.0 / DRAWS)
        self.assertTrue(np.all(np.abs(direct.mean(axis=0) - composed.mean(axis=0)) <= mean_bound))
        self.assertTrue(np.all(np.abs(direct.var(axis=0) - composed.var(axis=0)) <= variance_bound))

    def test_time_travel__BeyondT__RaisesStepIndexError(self):
        # Arrange
        schedule = build_linear_schedule(50)

        # Act & Assert
        with self.assertRaises(StepIndexError):
            time_travel(schedule, np.zeros(2), 45, 10, np.random.default_rng(0))

    def test_time_travel__ZeroInterval__RaisesValueError(self):
        # Arrange
        schedule = build_linear_schedule(50)

        # Act & Assert
        with self.assertRaises(ValueError):
            time_travel(schedule, np.zeros(2), 10, 0, np.random.default_rng(0))


if __name__ == '__main__':
    unittest.main()
