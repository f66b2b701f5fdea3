import logging
import time
from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Tuple, Union

import numpy as np

from copaintlab.conditioning import Observation
from copaintlab.config import CoPaintConfig
from copaintlab.denoiser import Denoiser
from copaintlab.errors import ConfigError, DimensionError, NumericFailureError
from copaintlab.sampler import ddim_step, estimate_x0, estimate_x0_vjp, rollout_deterministic, \
    rollout_deterministic_vjp, time_travel
from copaintlab.schedule import NoiseSchedule
from copaintlab.util import StepValidator, as_vector

logger = logging.getLogger(__name__)

# A visit whose loss grows by more than this factor has diverged.
LOSS_GROWTH_LIMIT = 1e6


@dataclass(frozen=True, slots=True)
class Anchor:
    """
    The Gaussian term N(mean, variance I) the optimized state is pulled towards. A variance of 0
    pins the state to the mean; the optimization then only follows the constraint term.
    """

    mean: np.ndarray
    variance: float


@dataclass(frozen=True, slots=True)
class Visit:
    """ Optimize the state at step t, then take the reverse step t -> t - 1. """

    t: int


@dataclass(frozen=True, slots=True)
class Rewind:
    """ Re-noise the state from step t to step target. """

    t: int
    target: int


def travel_plan(T: int, tau: int, K: int) -> Iterator[Union[Visit, Rewind]]:
    """
    Yields the visit and rewind events of the time travel loop. After the step that lands on a
    multiple t of tau (with t <= T - tau) the state is rewound to t + tau, up to K times in a row;
    then the counter is reset and the loop continues downwards. Rewinds also happen at t = 0.

    :param T: The number of steps.
    :param tau: The rewind interval, at least 1.
    :param K: The rewinds per interval. 0 yields the plain visits T, T - 1, ..., 1.
    """
    if tau < 1 or K < 0 or T < 1:
        raise ConfigError(f'travel plan needs T >= 1, tau >= 1 and K >= 0, got T={T}, tau={tau}, K={K}')
    t, remaining = T, K
    while t != 0:
        yield Visit(t)
        t -= 1
        if t % tau == 0 and t <= T - tau:
            if remaining > 0:
                yield Rewind(t, t + tau)
                t += tau
                remaining -= 1
            else:
                remaining = K


@dataclass(slots=True, kw_only=True)
class RunEntry:
    """ The record of one visit. """

    visit_index: int
    t: int
    loss_pre: float
    """ The step loss before the optimization. """
    loss_post: float
    """ The step loss after the optimization. """
    residual: float
    """ ||s_0 - r(x0_hat)|| of the X_0 estimate used in the reverse step. """
    anchor: Optional[np.ndarray] = None
    """ The anchor mean the state was optimized against, None for the prior. """


@dataclass(slots=True, kw_only=True)
class RunRecord:
    """ The trajectory of a sampler run. """

    CSV_COLUMNS = ('visit_index', 't', 'loss_pre', 'loss_post', 'residual')

    method: str
    entries: List[RunEntry] = field(default_factory=list)
    x0: Optional[np.ndarray] = None
    """ The final state. """
    duration: float = 0.0
    """ The wall-clock duration in seconds. """
    rewinds: int = 0
    """ The number of time travel rewinds. """

    def add(self, t: int, loss_pre: float, loss_post: float, residual: float,
            anchor: Optional[np.ndarray] = None) -> RunEntry:
        entry = RunEntry(visit_index=len(self.entries), t=t, loss_pre=float(loss_pre), loss_post=float(loss_post),
                         residual=float(residual), anchor=anchor)
        self.entries.append(entry)
        return entry

    @property
    def visited_steps(self) -> List[int]:
        return [entry.t for entry in self.entries]

    def csv_rows(self) -> List[List]:
        """ Gets one row per entry in the column order of CSV_COLUMNS. """
        return [[e.visit_index, e.t, repr(e.loss_pre), repr(e.loss_post), repr(e.residual)] for e in self.entries]


def xi_schedule(config: CoPaintConfig, t: int) -> float:
    """
    Gets the constraint variance xi'_t^2 = xi_decay^-(T - t).
    :param t: A step in [1, T].
    """
    t = StepValidator.validate_step(t, 1, config.T)
    return float(config.xi_decay ** -(config.T - t))


def learning_rate(config: CoPaintConfig, schedule: NoiseSchedule, t: int) -> float:
    """ Gets the step size eta_t = eta0 * sqrt(alpha_bar_t) for a step t in [1, T]. """
    t = StepValidator.validate_step(t, 1, schedule.T)
    return float(config.eta0 * np.sqrt(schedule.alpha_bar[t]))


def _anchor_term(x: np.ndarray, anchor: Optional[Anchor]) -> Tuple[float, np.ndarray]:
    if anchor is None:
        return 0.5 * float(x @ x), x
    if anchor.variance == 0.0:
        return 0.0, np.zeros_like(x)
    diff = x - anchor.mean
    return 0.5 * float(diff @ diff) / anchor.variance, diff / anchor.variance


def step_loss(schedule: NoiseSchedule, denoiser: Denoiser, obs: Observation, x: np.ndarray, t: int,
              anchor: Optional[Anchor], config: CoPaintConfig) -> float:
    """
    Computes the unnormalized negative log-posterior of the state x at step t:

        ||x - mu||^2 / (2 sigma^2) + ||s_0 - r(f(x))||^2 / (2 xi'_t^2)

    where f is estimate_x0 with config.H. Without anchor the first term is the prior ||x||^2 / 2; an
    anchor with variance 0 contributes nothing.
    """
    x = as_vector(x, denoiser.dim)
    loss, _ = _anchor_term(x, anchor)
    if obs.operator.output_dim > 0:
        residual = obs.residual(estimate_x0(schedule, denoiser, x, t, config.H))
        loss += 0.5 * float(residual @ residual) / xi_schedule(config, t)
    return loss


def _constraint_grad(schedule: NoiseSchedule, denoiser: Denoiser, obs: Observation, x: np.ndarray, t: int,
                     config: CoPaintConfig) -> np.ndarray:
    if obs.operator.output_dim == 0:
        return np.zeros_like(x)
    residual = obs.residual(estimate_x0(schedule, denoiser, x, t, config.H))
    cotangent = obs.operator.adjoint(-residual) / xi_schedule(config, t)
    return estimate_x0_vjp(schedule, denoiser, x, t, config.H, cotangent)


def step_grad(schedule: NoiseSchedule, denoiser: Denoiser, obs: Observation, x: np.ndarray, t: int,
              anchor: Optional[Anchor], config: CoPaintConfig) -> np.ndarray:
    """
    Computes the gradient of step_loss with respect to x:

        (x - mu) / sigma^2 + J^T r^T (r(f(x)) - s_0) / xi'_t^2
    """
    x = as_vector(x, denoiser.dim)
    _, grad = _anchor_term(x, anchor)
    return grad + _constraint_grad(schedule, denoiser, obs, x, t, config)


def optimize_step(schedule: NoiseSchedule, denoiser: Denoiser, obs: Observation, x_init: np.ndarray, t: int,
                  anchor: Optional[Anchor], config: CoPaintConfig) -> np.ndarray:
    """
    Runs config.G descent updates with step size eta_t on step_loss.

    Without anchor every update is plain gradient descent x <- x - eta_t * grad. An anchor with
    variance 0 first resets x to the anchor mean, the updates then follow the constraint term only.
    With a positive variance every update takes the gradient step on the constraint term and then
    solves the anchor term exactly:

        y = x - eta_t * grad_constraint(x)
        x <- (sigma^2 * y + eta_t * mu) / (sigma^2 + eta_t)

    Its fixed point is the minimizer of step_loss for any ratio eta_t / sigma^2.

    :return: The optimized state. G = 0 returns x_init unchanged.
    """
    if config.G == 0:
        return x_init
    x = as_vector(x_init, denoiser.dim)
    if anchor is not None and anchor.variance == 0.0:
        x = anchor.mean.copy()
    proximal = anchor is not None and anchor.variance > 0.0
    eta = learning_rate(config, schedule, t)
    for _ in range(config.G):
        if proximal:
            grad = _constraint_grad(schedule, denoiser, obs, x, t, config)
        else:
            grad = step_grad(schedule, denoiser, obs, x, t, anchor, config)
        if not np.all(np.isfinite(grad)):
            logger.error('non-finite gradient at t=%d', t)
            raise NumericFailureError(f'non-finite gradient at t={t}')
        x = x - eta * grad
        if proximal:
            x = (anchor.variance * x + eta * anchor.mean) / (anchor.variance + eta)
    if not np.all(np.isfinite(x)):
        logger.error('non-finite state at t=%d', t)
        raise NumericFailureError(f'non-finite state at t={t}')
    return x


def validate_run(schedule: NoiseSchedule, denoiser: Denoiser, obs: Observation, config: CoPaintConfig) -> None:
    """
    Rejects runs whose inputs disagree: the schedule must have config.T steps and config.sigma_eta,
    the observation and denoiser must share their dimension.
    """
    if schedule.T != config.T:
        raise ConfigError(f'config has T={config.T}, schedule has T={schedule.T}')
    if schedule.eta != config.sigma_eta:
        raise ConfigError(f'config has sigma_eta={config.sigma_eta}, schedule has eta={schedule.eta}')
    if obs.dim != denoiser.dim:
        raise DimensionError(f'observation has dimension {obs.dim}, denoiser has {denoiser.dim}')


def finish_run(record: RunRecord, x: np.ndarray, obs: Observation, config: CoPaintConfig, start: float):
    """ Applies the final projection, stores X_0 and the duration in the record and logs the run end. """
    if config.projection_enabled(obs.operator):
        x = obs.operator.project(x, obs.s0)
    record.x0 = x
    record.duration = time.perf_counter() - start
    logger.info('%s finished: %d visits, %d rewinds, %.3fs', record.method, len(record.entries), record.rewinds,
                record.duration)
    return x, record


def copaint_run(schedule: NoiseSchedule, denoiser: Denoiser, obs: Observation, config: CoPaintConfig,
                rng: np.random.Generator, method: str = 'copaint') -> Tuple[np.ndarray, RunRecord]:
    """
    Samples X_0 conditioned on the observation with greedy successive correction and time travel.

    Starting from X_T ~ N(0, I) every visited state is optimized by optimize_step against the anchor
    the previous reverse step produced (the prior at T), then ddim_step produces the next state and
    anchor. The visit order follows travel_plan(T, tau, K); rewound states are anchored at themselves.
    With final projection the revealed coordinates of X_0 are finally set to s_0.

    :param schedule: The sampling schedule with config.T steps and eta = config.sigma_eta.
    :param denoiser: The denoiser.
    :param obs: The observation.
    :param config: The hyperparameters.
    :param rng: The run's random generator.
    :param method: The method name written to the record.
    :return: The sample X_0 and the run record.
    """
    validate_run(schedule, denoiser, obs, config)
    start = time.perf_counter()
    logger.info('%s run: T=%d, G=%d, tau=%d, K=%d, H=%d, seed=%d', method, config.T, config.G, config.tau, config.K,
                config.H, config.seed)
    record = RunRecord(method=method)
    x = rng.standard_normal(denoiser.dim)
    anchor: Optional[Anchor] = None

    for event in travel_plan(config.T, config.tau, config.K):
        if isinstance(event, Rewind):
            x = time_travel(schedule, x, event.t, event.target - event.t, rng)
            anchor = None if event.target == schedule.T else Anchor(x, float(schedule.sigma[event.target + 1] ** 2))
            record.rewinds += 1
            continue

        t = event.t
        loss_pre = step_loss(schedule, denoiser, obs, x, t, anchor, config)
        x = optimize_step(schedule, denoiser, obs, x, t, anchor, config)
        loss_post = step_loss(schedule, denoiser, obs, x, t, anchor, config) if config.G > 0 else loss_pre
        if not np.isfinite(loss_post):
            logger.error('non-finite loss at t=%d', t)
            raise NumericFailureError(f'non-finite loss at t={t}')
        if loss_post > LOSS_GROWTH_LIMIT * max(loss_pre, 1.0):
            logger.error('loss diverged at t=%d: %.3g -> %.3g', t, loss_pre, loss_post)
            raise NumericFailureError(f'loss diverged at t={t}: {loss_pre:.3g} -> {loss_post:.3g}')

        result = ddim_step(schedule, denoiser, x, t, rng)
        residual = obs.residual(result.x0_hat)
        record.add(t, loss_pre, loss_post, np.linalg.norm(residual), None if anchor is None else anchor.mean)
        x = result.x_prev
        anchor = Anchor(result.mu_tilde, float(schedule.sigma[t] ** 2))

    return finish_run(record, x, obs, config, start)


def onestep_run(schedule: NoiseSchedule, denoiser: Denoiser, obs: Observation, config: CoPaintConfig,
                rng: np.random.Generator) -> Tuple[np.ndarray, RunRecord]:
    """
    Optimizes X_T on the one-step approximated posterior (prior plus the constraint on f^(T)(X_T))
    with config.G gradient steps, then maps it to X_0 with the deterministic rollout.
    """
    validate_run(schedule, denoiser, obs, config)
    start = time.perf_counter()
    logger.info('onestep run: T=%d, G=%d, seed=%d', config.T, config.G, config.seed)
    record = RunRecord(method='onestep')
    T = schedule.T
    x = rng.standard_normal(denoiser.dim)

    loss_pre = step_loss(schedule, denoiser, obs, x, T, None, config)
    x = optimize_step(schedule, denoiser, obs, x, T, None, config)
    loss_post = step_loss(schedule, denoiser, obs, x, T, None, config)
    x = rollout_deterministic(schedule, denoiser, x, T)
    record.add(T, loss_pre, loss_post, np.linalg.norm(obs.residual(x)))
    return finish_run(record, x, obs, config, start)


def _prototype_loss(schedule, denoiser, obs, x, weight) -> Tuple[float, np.ndarray]:
    residual = obs.residual(rollout_deterministic(schedule, denoiser, x, schedule.T))
    return 0.5 * float(x @ x) + 0.5 * weight * float(residual @ residual), residual


def prototype_run(schedule: NoiseSchedule, denoiser: Denoiser, obs: Observation, config: CoPaintConfig,
                  rng: np.random.Generator) -> Tuple[np.ndarray, RunRecord]:
    """
    Optimizes X_T on the exact posterior of the deterministic sampler,

        ||X_T||^2 / 2 + ||s_0 - r(g(X_T))||^2 / (2 xi_T^2),

    by config.prototype_steps gradient steps with the fixed rate config.prototype_lr, differentiating
    through the full rollout g. The result is mapped to X_0 by g. Every gradient step is one entry
    of the record.

    :raises ConfigError: If T exceeds config.prototype_max_T.
    """
    validate_run(schedule, denoiser, obs, config)
    if schedule.T > config.prototype_max_T:
        raise ConfigError(f'prototype sampler is limited to T <= {config.prototype_max_T}, got T={schedule.T}')
    start = time.perf_counter()
    logger.info('prototype run: T=%d, steps=%d, seed=%d', config.T, config.prototype_steps, config.seed)
    record = RunRecord(method='prototype')
    T = schedule.T
    weight = 1.0 / config.prototype_xi ** 2
    x = rng.standard_normal(denoiser.dim)

    loss, residual = _prototype_loss(schedule, denoiser, obs, x, weight)
    for _ in range(config.prototype_steps):
        grad = x
        if obs.operator.output_dim > 0:
            cotangent = obs.operator.adjoint(-residual) * weight
            grad = x + rollout_deterministic_vjp(schedule, denoiser, x, T, cotangent)
        if not np.all(np.isfinite(grad)):
            logger.error('non-finite gradient at t=%d', T)
            raise NumericFailureError(f'non-finite gradient at t={T}')
        x = x - config.prototype_lr * grad
        loss_post, residual = _prototype_loss(schedule, denoiser, obs, x, weight)
        record.add(T, loss, loss_post, np.linalg.norm(residual))
        loss = loss_post

    x = rollout_deterministic(schedule, denoiser, x, T)
    return finish_run(record, x, obs, config, start)
