import logging
import time
from typing import Tuple

import numpy as np

from copaintlab.conditioning import Observation, RevealKind, RevealOperator
from copaintlab.config import CoPaintConfig
from copaintlab.copaint import Rewind, RunRecord, finish_run, travel_plan, validate_run
from copaintlab.denoiser import Denoiser
from copaintlab.errors import UnsupportedOperatorError
from copaintlab.sampler import ddim_step, ddim_update, time_travel
from copaintlab.schedule import NoiseSchedule
from copaintlab.util import ensure_finite

logger = logging.getLogger(__name__)


def _noised_reference(schedule: NoiseSchedule, obs: Observation, t: int, rng: np.random.Generator) -> np.ndarray:
    """ Gets the revealed values at step t: s_0 itself for t = 0, a forward sample of s_0 otherwise. """
    if t == 0:
        return obs.s0
    alpha_bar = schedule.alpha_bar[t]
    noised = np.sqrt(alpha_bar) * obs.s0
    if obs.s0.shape[0] > 0:
        noised = noised + np.sqrt(1.0 - alpha_bar) * rng.standard_normal(obs.s0.shape[0])
    return noised


def _replacement_run(schedule: NoiseSchedule, denoiser: Denoiser, obs: Observation, config: CoPaintConfig,
                     rng: np.random.Generator, K: int, method: str) -> Tuple[np.ndarray, RunRecord]:
    validate_run(schedule, denoiser, obs, config)
    if obs.operator.kind is not RevealKind.PIXEL_MASK:
        raise UnsupportedOperatorError(f'{method} replaces coordinates and needs a pixel mask operator')
    start = time.perf_counter()
    logger.info('%s run: T=%d, tau=%d, K=%d, seed=%d', method, config.T, config.tau, K, config.seed)
    record = RunRecord(method=method)
    x = rng.standard_normal(denoiser.dim)

    for event in travel_plan(config.T, config.tau, K):
        if isinstance(event, Rewind):
            x = time_travel(schedule, x, event.t, event.target - event.t, rng)
            record.rewinds += 1
            continue

        t = event.t
        result = ddim_step(schedule, denoiser, x, t, rng)
        residual = obs.residual(result.x0_hat)
        energy = 0.5 * float(residual @ residual)
        record.add(t, energy, energy, np.linalg.norm(residual))
        x = obs.operator.project(result.x_prev, _noised_reference(schedule, obs, t - 1, rng))
        ensure_finite(x, 'state', t)

    return finish_run(record, x, obs, config, start)


def blended_run(schedule: NoiseSchedule, denoiser: Denoiser, obs: Observation, config: CoPaintConfig,
                rng: np.random.Generator) -> Tuple[np.ndarray, RunRecord]:
    """
    Samples with coordinate replacement: after every reverse step t -> t - 1 the revealed coordinates
    are replaced by sqrt(alpha_bar_{t-1}) s_0 + sqrt(1 - alpha_bar_{t-1}) z, and by s_0 itself at step 0.

    :raises UnsupportedOperatorError: For average pooling operators.
    """
    return _replacement_run(schedule, denoiser, obs, config, rng, K=0, method='blended')


def repaint_lite_run(schedule: NoiseSchedule, denoiser: Denoiser, obs: Observation, config: CoPaintConfig,
                     rng: np.random.Generator) -> Tuple[np.ndarray, RunRecord]:
    """
    Coordinate replacement inside the time travel visit order of travel_plan(T, tau, K) without any
    gradient steps. A directional baseline that reuses the DDIM machinery, not a reproduction of the
    original resampling schedule. K = 0 is blended_run.

    :raises UnsupportedOperatorError: For average pooling operators.
    """
    return _replacement_run(schedule, denoiser, obs, config, rng, K=config.K, method='repaint-lite')


def range_null_projection(operator: RevealOperator, x0_hat: np.ndarray, s0: np.ndarray) -> np.ndarray:
    """
    Corrects an X_0 estimate to satisfy the measurement: x0_hat + r^+ (s_0 - r(x0_hat)). Pixel masks
    overwrite the revealed coordinates, so r of the result equals s_0 bitwise.
    """
    if operator.kind is RevealKind.PIXEL_MASK:
        return operator.project(x0_hat, s0)
    return x0_hat + operator.pseudo_inverse(s0 - operator.apply(x0_hat))


def ddnm_run(schedule: NoiseSchedule, denoiser: Denoiser, obs: Observation, config: CoPaintConfig,
             rng: np.random.Generator) -> Tuple[np.ndarray, RunRecord]:
    """
    Samples with range-null space projection: every step computes x0_hat = f^(t)(X_t), projects it
    with range_null_projection and takes the DDIM update with the projected estimate.
    Works with every reveal operator.
    """
    validate_run(schedule, denoiser, obs, config)
    start = time.perf_counter()
    logger.info('ddnm run: T=%d, seed=%d', config.T, config.seed)
    record = RunRecord(method='ddnm')
    x = rng.standard_normal(denoiser.dim)

    for t in schedule.steps_descending:
        x0_hat = denoiser.value(x, schedule.model_step(t))
        residual = obs.residual(x0_hat)
        projected = range_null_projection(obs.operator, x0_hat, obs.s0)
        energy = 0.5 * float(residual @ residual)
        record.add(t, energy, 0.5 * float(np.sum(obs.residual(projected) ** 2)), np.linalg.norm(residual))
        x = ddim_update(schedule, x, t, projected, rng).x_prev
        ensure_finite(x, 'state', t)

    return finish_run(record, x, obs, config, start)
