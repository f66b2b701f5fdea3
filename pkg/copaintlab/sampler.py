import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from copaintlab.denoiser import Denoiser
from copaintlab.errors import DimensionError
from copaintlab.schedule import NoiseSchedule
from copaintlab.util import StepValidator, as_vector

logger = logging.getLogger(__name__)


@dataclass(frozen=True, slots=True, kw_only=True)
class DdimStepResult:
    """ The outcome of one reverse DDIM step t -> t - 1. """

    x_prev: np.ndarray
    """ The new state X_{t-1}. """
    mu_tilde: np.ndarray
    """ The deterministic mean before noise injection, the anchor of the next optimization. """
    x0_hat: np.ndarray
    """ The X_0 estimate used in the step. """


def _check_dim(denoiser: Denoiser, x: np.ndarray) -> np.ndarray:
    x = as_vector(x)
    if x.shape[0] != denoiser.dim:
        raise DimensionError(f'state has length {x.shape[0]}, denoiser expects {denoiser.dim}')
    return x


def forward_sample(schedule: NoiseSchedule, x0: np.ndarray, t: int, rng: np.random.Generator) -> np.ndarray:
    """
    Draws X_t ~ q(X_t | X_0) = N(sqrt(alpha_bar_t) x0, (1 - alpha_bar_t) I).

    :param schedule: The noise schedule.
    :param x0: The clean state.
    :param t: The step in [0, T]. For t = 0 x0 is returned without a draw.
    :param rng: The random generator.
    """
    x0 = as_vector(x0, name='x0')
    t = StepValidator.validate_step(t, 0, schedule.T)
    if t == 0:
        return x0.copy()
    alpha_bar = schedule.alpha_bar[t]
    return np.sqrt(alpha_bar) * x0 + np.sqrt(1.0 - alpha_bar) * rng.standard_normal(x0.shape[0])


def _ddim_mean(alpha_bar: float, alpha_bar_prev: float, sigma: float, x: np.ndarray, x0_hat: np.ndarray) -> np.ndarray:
    direction = np.sqrt(max(1.0 - alpha_bar_prev - sigma ** 2, 0.0))
    return np.sqrt(alpha_bar_prev) * x0_hat + direction * (x - np.sqrt(alpha_bar) * x0_hat) / np.sqrt(1.0 - alpha_bar)


def _transition_coefficients(alpha_bar: float, alpha_bar_prev: float) -> Tuple[float, float]:
    """ The deterministic mean is c * x0_hat + k * x; returns (c, k). """
    k = np.sqrt(max(1.0 - alpha_bar_prev, 0.0)) / np.sqrt(1.0 - alpha_bar)
    return np.sqrt(alpha_bar_prev) - k * np.sqrt(alpha_bar), k


def ddim_update(schedule: NoiseSchedule, x_t: np.ndarray, t: int, x0_hat: np.ndarray,
                rng: Optional[np.random.Generator], sigma: Optional[float] = None) -> DdimStepResult:
    """
    Performs the DDIM update t -> t - 1 for a given X_0 estimate:

        mu_tilde = sqrt(alpha_bar_{t-1}) x0_hat + sqrt(1 - alpha_bar_{t-1} - sigma^2) (x_t - sqrt(alpha_bar_t) x0_hat) / sqrt(1 - alpha_bar_t)
        x_prev = mu_tilde + sigma z

    :param schedule: The noise schedule.
    :param x_t: The current state.
    :param t: The step in [1, T].
    :param x0_hat: The X_0 estimate.
    :param rng: The random generator. Only drawn from if sigma > 0.
    :param sigma: Overrides the schedule's sigma_t, e.g. 0 for a deterministic step.
    """
    t = StepValidator.validate_step(t, 1, schedule.T)
    sigma = float(schedule.sigma[t]) if sigma is None else float(sigma)
    mu_tilde = _ddim_mean(schedule.alpha_bar[t], schedule.alpha_bar[t - 1], sigma, x_t, x0_hat)
    x_prev = mu_tilde
    if sigma > 0.0:
        x_prev = mu_tilde + sigma * rng.standard_normal(mu_tilde.shape[0])
    return DdimStepResult(x_prev=x_prev, mu_tilde=mu_tilde, x0_hat=x0_hat)


def ddim_step(schedule: NoiseSchedule, denoiser: Denoiser, x_t: np.ndarray, t: int,
              rng: Optional[np.random.Generator]) -> DdimStepResult:
    """
    Performs one reverse DDIM step with the one-step estimate x0_hat = f^(t)(x_t).

    :param schedule: The sampling schedule.
    :param denoiser: The denoiser. It is evaluated at the model step of t.
    :param x_t: The current state.
    :param t: The step in [1, T].
    :param rng: The random generator. Only drawn from if sigma_t > 0.
    """
    x_t = _check_dim(denoiser, x_t)
    t = StepValidator.validate_step(t, 1, schedule.T)
    x0_hat = denoiser.value(x_t, schedule.model_step(t))
    return ddim_update(schedule, x_t, t, x0_hat, rng)


def ddim_trajectory(schedule: NoiseSchedule, denoiser: Denoiser, x_start: np.ndarray,
                    rng: Optional[np.random.Generator]) -> List[DdimStepResult]:
    """
    Runs the unconditional reverse process from X_T down to X_0.
    :return: The step results for t = T, ..., 1. The last x_prev is X_0.
    """
    x = _check_dim(denoiser, x_start)
    results = []
    for t in schedule.steps_descending:
        result = ddim_step(schedule, denoiser, x, t, rng)
        results.append(result)
        x = result.x_prev
    return results


def ddim_sample(schedule: NoiseSchedule, denoiser: Denoiser, rng: np.random.Generator) -> np.ndarray:
    """
    Draws an unconditional sample: X_T ~ N(0, I) followed by ddim_step down to step 0.
    """
    x_start = rng.standard_normal(denoiser.dim)
    return ddim_trajectory(schedule, denoiser, x_start, rng)[-1].x_prev


def multistep_grid(t: int, H: int) -> List[int]:
    """
    Gets the evenly spaced steps t = g_0 > g_1 > ... > 1 of the multi-step X_0 estimate.
    H values are rounded and de-duplicated, so fewer than H steps remain when H > t.
    """
    if H < 1:
        raise ValueError(f'H must be at least 1, got {H}')
    if t < 1:
        raise ValueError(f't must be at least 1, got {t}')
    return sorted({int(round(s)) for s in np.linspace(t, 1, H)}, reverse=True)


def _deterministic_path(schedule: NoiseSchedule, denoiser: Denoiser, x: np.ndarray,
                        grid: Sequence[int]) -> List[np.ndarray]:
    """ Runs deterministic transitions along the descending grid and then to 0. Returns all states. """
    states = [x]
    for t, s in zip(grid, [*grid[1:], 0]):
        x0_hat = denoiser.value(x, schedule.model_step(t))
        x = _ddim_mean(schedule.alpha_bar[t], schedule.alpha_bar[s], 0.0, x, x0_hat)
        states.append(x)
    return states


def _deterministic_path_vjp(schedule: NoiseSchedule, denoiser: Denoiser, states: List[np.ndarray],
                            grid: Sequence[int], v: np.ndarray) -> np.ndarray:
    targets = [*grid[1:], 0]
    for i in range(len(grid) - 1, -1, -1):
        t, s = grid[i], targets[i]
        c, k = _transition_coefficients(schedule.alpha_bar[t], schedule.alpha_bar[s])
        v = c * denoiser.vjp(states[i], schedule.model_step(t), v) + k * v
    return v


def rollout_deterministic(schedule: NoiseSchedule, denoiser: Denoiser, x_start: np.ndarray, t_start: int) -> np.ndarray:
    """
    Computes the deterministic map g(x_start): DDIM steps with sigma forced to 0 from t_start down to 0.

    :param schedule: The sampling schedule.
    :param denoiser: The denoiser.
    :param x_start: The state at t_start.
    :param t_start: The start step in [1, T].
    :return: The final X_0.
    """
    x_start = _check_dim(denoiser, x_start)
    t_start = StepValidator.validate_step(t_start, 1, schedule.T, name='t_start')
    return _deterministic_path(schedule, denoiser, x_start, range(t_start, 0, -1))[-1]


def rollout_deterministic_vjp(schedule: NoiseSchedule, denoiser: Denoiser, x_start: np.ndarray, t_start: int,
                              v: np.ndarray) -> np.ndarray:
    """
    Computes J^T v for the Jacobian J of rollout_deterministic with respect to x_start by chaining the
    per-step transpose-Jacobian products in reverse order.
    """
    x_start = _check_dim(denoiser, x_start)
    v = as_vector(v, denoiser.dim, name='v')
    t_start = StepValidator.validate_step(t_start, 1, schedule.T, name='t_start')
    grid = list(range(t_start, 0, -1))
    states = _deterministic_path(schedule, denoiser, x_start, grid)
    return _deterministic_path_vjp(schedule, denoiser, states, grid, v)


def estimate_x0(schedule: NoiseSchedule, denoiser: Denoiser, x_t: np.ndarray, t: int, H: int = 1) -> np.ndarray:
    """
    Estimates X_0 from x_t. H = 1 is the one-step estimate f^(t)(x_t). For H > 1 the estimate runs
    deterministic DDIM transitions along multistep_grid(t, H) and finishes with f^(1).

    :param schedule: The sampling schedule.
    :param denoiser: The denoiser.
    :param x_t: The state at step t.
    :param t: The step in [1, T].
    :param H: The number of grid steps.
    """
    x_t = _check_dim(denoiser, x_t)
    t = StepValidator.validate_step(t, 1, schedule.T)
    if H == 1:
        return denoiser.value(x_t, schedule.model_step(t))
    return _deterministic_path(schedule, denoiser, x_t, multistep_grid(t, H))[-1]


def estimate_x0_vjp(schedule: NoiseSchedule, denoiser: Denoiser, x_t: np.ndarray, t: int, H: int,
                    v: np.ndarray) -> np.ndarray:
    """ Computes J^T v for the Jacobian J of estimate_x0 with respect to x_t. """
    x_t = _check_dim(denoiser, x_t)
    v = as_vector(v, denoiser.dim, name='v')
    t = StepValidator.validate_step(t, 1, schedule.T)
    if H == 1:
        return denoiser.vjp(x_t, schedule.model_step(t), v)
    grid = multistep_grid(t, H)
    states = _deterministic_path(schedule, denoiser, x_t, grid)
    return _deterministic_path_vjp(schedule, denoiser, states, grid, v)


def time_travel(schedule: NoiseSchedule, x_t: np.ndarray, t: int, tau: int, rng: np.random.Generator) -> np.ndarray:
    """
    Rewinds a state from step t to step t + tau with the composed forward kernel
    q(X_{t+tau} | X_t) = N(sqrt(alpha_bar_{t+tau} / alpha_bar_t) x_t, (1 - alpha_bar_{t+tau} / alpha_bar_t) I).
    The noise is drawn freshly on every call.

    :param schedule: The sampling schedule.
    :param x_t: The state at step t.
    :param t: The step in [0, T - tau].
    :param tau: The rewind interval, at least 1.
    :param rng: The random generator.
    """
    x_t = as_vector(x_t)
    if tau < 1:
        raise ValueError(f'tau must be at least 1, got {tau}')
    t = StepValidator.validate_step(t, 0, schedule.T - tau)
    ratio = schedule.alpha_bar[t + tau] / schedule.alpha_bar[t]
    logger.debug('time travel %d -> %d', t, t + tau)
    return np.sqrt(ratio) * x_t + np.sqrt(max(1.0 - ratio, 0.0)) * rng.standard_normal(x_t.shape[0])
