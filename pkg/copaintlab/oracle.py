from dataclasses import dataclass
from typing import Union

import numpy as np

from copaintlab.conditioning import Observation, RevealKind, RevealOperator
from copaintlab.denoiser import GaussianWorld
from copaintlab.errors import DimensionError, NumericFailureError, UnsupportedOperatorError
from copaintlab.schedule import NoiseSchedule
from copaintlab.util import StepValidator, as_vector

MAX_ORACLE_DIM = 64
MAX_CONDITION_NUMBER = 1e12


@dataclass(frozen=True, slots=True, kw_only=True, eq=False)
class ConditionalGaussian:
    """
    The law of a Gaussian world given exact values of some coordinates.

    mean and cov live on the free (unrevealed) coordinates in ascending index order.
    """

    mean: np.ndarray
    """ The conditional mean of the free coordinates. """
    cov: np.ndarray
    """ The conditional covariance of the free coordinates (Schur complement). """
    revealed: np.ndarray
    """ Boolean vector over all coordinates, True marks a fixed coordinate. """
    s0: np.ndarray
    """ The values of the fixed coordinates in ascending index order. """

    @property
    def dim(self) -> int:
        return int(self.revealed.shape[0])

    @property
    def free_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.revealed)

    def full_mean(self) -> np.ndarray:
        """ Gets the conditional mean over all coordinates, s0 on the fixed ones. """
        out = np.empty(self.dim)
        out[self.revealed] = self.s0
        out[~self.revealed] = self.mean
        return out

    def std(self) -> np.ndarray:
        """ Gets the conditional standard deviations of the free coordinates. """
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None))


def _check_size(n: int) -> None:
    if n > MAX_ORACLE_DIM:
        raise DimensionError(f'the oracle is limited to {MAX_ORACLE_DIM} coordinates, got {n}')


def condition(prior: Union[GaussianWorld, ConditionalGaussian], obs: Observation) -> ConditionalGaussian:
    """
    Conditions a Gaussian on the revealed coordinates of a pixel mask observation:

        mean_u = m_u + S_ur S_rr^-1 (s_0 - m_r)
        cov_u  = S_uu - S_ur S_rr^-1 S_ru

    A ConditionalGaussian prior is conditioned further; coordinates it already fixes must carry the
    same values in the observation.

    :param prior: A Gaussian world or an already conditioned Gaussian.
    :param obs: A pixel mask observation of the same dimension.
    :raises NumericFailureError: If the revealed block of the covariance is numerically singular.
    """
    if obs.operator.kind is not RevealKind.PIXEL_MASK:
        raise UnsupportedOperatorError('the oracle conditions on pixel mask observations only')
    if isinstance(prior, GaussianWorld):
        n = prior.dim
        mean, cov = prior.mean, prior.cov
        fixed = np.zeros(n, dtype=bool)
        fixed_values = np.zeros(n)
    else:
        n = prior.dim
        mean, cov = prior.mean, prior.cov
        fixed = prior.revealed
        fixed_values = np.zeros(n)
        fixed_values[fixed] = prior.s0
    _check_size(n)
    if obs.dim != n:
        raise DimensionError(f'observation has dimension {obs.dim}, prior has {n}')

    observed = np.zeros(n)
    observed[obs.operator.mask] = obs.s0
    already = obs.operator.mask & fixed
    if not np.array_equal(observed[already], fixed_values[already]):
        raise ValueError('observation contradicts already fixed coordinates')

    free = np.flatnonzero(~fixed)
    new = obs.operator.mask[free]
    r, u = np.flatnonzero(new), np.flatnonzero(~new)
    if r.shape[0] == 0:
        cond_mean, cond_cov = np.array(mean, dtype=np.float64), np.array(cov, dtype=np.float64)
    else:
        s_rr = cov[np.ix_(r, r)]
        condition_number = np.linalg.cond(s_rr)
        if not condition_number < MAX_CONDITION_NUMBER:
            raise NumericFailureError(f'revealed covariance block is singular (condition number {condition_number:.3g})')
        s_ur = cov[np.ix_(u, r)]
        gain = np.linalg.solve(s_rr, s_ur.T).T
        cond_mean = mean[u] + gain @ (observed[free[r]] - mean[r])
        cond_cov = cov[np.ix_(u, u)] - gain @ s_ur.T
        cond_cov = 0.5 * (cond_cov + cond_cov.T)

    revealed = fixed | obs.operator.mask
    values = np.where(obs.operator.mask, observed, fixed_values)
    return ConditionalGaussian(mean=cond_mean, cov=cond_cov, revealed=revealed, s0=values[revealed])


def exact_marginal(world: GaussianWorld, schedule: NoiseSchedule, t: int) -> GaussianWorld:
    """
    Gets the law of X_t, N(sqrt(alpha_bar_t) m, alpha_bar_t S + (1 - alpha_bar_t) I).
    :param t: A step in [0, T]; t = 0 returns the world itself.
    """
    t = StepValidator.validate_step(t, 0, schedule.T)
    alpha_bar = schedule.alpha_bar[t]
    if t == 0:
        return world
    return GaussianWorld(np.sqrt(alpha_bar) * world.mean, alpha_bar * world.cov + (1.0 - alpha_bar) * np.eye(world.dim))


def noisy_channel_joint(world: GaussianWorld, alpha_bar: float) -> GaussianWorld:
    """
    Gets the joint law of (X_0, X_t) with X_t = sqrt(alpha_bar) X_0 + sqrt(1 - alpha_bar) Z as a world
    of dimension 2N, X_0 first.
    """
    n = world.dim
    _check_size(2 * n)
    scale = np.sqrt(alpha_bar)
    cov = np.empty((2 * n, 2 * n))
    cov[:n, :n] = world.cov
    cov[:n, n:] = scale * world.cov
    cov[n:, :n] = scale * world.cov
    cov[n:, n:] = alpha_bar * world.cov + (1.0 - alpha_bar) * np.eye(n)
    return GaussianWorld(np.concatenate([world.mean, scale * world.mean]), cov)


def posterior_mean(world: GaussianWorld, schedule: NoiseSchedule, x: np.ndarray, t: int) -> np.ndarray:
    """
    Computes E[X_0 | X_t = x] by conditioning the noisy channel joint on its X_t half.
    :param t: A step in [1, T].
    """
    t = StepValidator.validate_step(t, 1, schedule.T)
    x = as_vector(x, world.dim)
    n = world.dim
    joint = noisy_channel_joint(world, schedule.alpha_bar[t])
    mask = np.concatenate([np.zeros(n, dtype=bool), np.ones(n, dtype=bool)])
    return condition(joint, Observation(x, RevealOperator.pixel_mask(mask))).mean
