import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from copaintlab.conditioning import Observation
from copaintlab.denoiser import Denoiser, mirror_pairs
from copaintlab.sampler import DdimStepResult, ddim_trajectory
from copaintlab.schedule import NoiseSchedule
from copaintlab.util import StepValidator, as_vector

logger = logging.getLogger(__name__)


@dataclass(slots=True, kw_only=True)
class MetricReport:
    """ The quality measures of one sample. """

    CSV_COLUMNS = ('constraint_mean_abs', 'constraint_max_abs', 'coherence_error')

    constraint_mean_abs: float
    """ The mean of |s_0 - r(x0)|. """
    constraint_max_abs: float
    """ The maximum of |s_0 - r(x0)|. """
    coherence_error: Optional[float] = None
    """ The mirror coherence error, None for odd dimensions. """
    gap_curve: List[Tuple[int, float]] = field(default_factory=list)
    """ Pairs (t, mean one-step gap), if measured. """

    def csv_row(self) -> List:
        coherence = '' if self.coherence_error is None else repr(self.coherence_error)
        return [repr(self.constraint_mean_abs), repr(self.constraint_max_abs), coherence]


def constraint_error(obs: Observation, x0: np.ndarray) -> Tuple[float, float]:
    """
    Gets the mean and maximum of |s_0 - r(x0)|, both 0 if nothing is revealed.
    """
    residual = np.abs(obs.residual(as_vector(x0, obs.dim, name='x0')))
    if residual.shape[0] == 0:
        return 0.0, 0.0
    return float(residual.mean()), float(residual.max())


def coherence_error_mirror(x0: np.ndarray) -> float:
    """
    Gets the mean of |x0[i] - x0[n - 1 - i]| over the n / 2 mirror pairs.
    :raises DimensionError: For odd dimensions.
    """
    x0 = as_vector(x0, name='x0')
    half = x0.shape[0] // 2
    partners = mirror_pairs(x0.shape[0])
    return float(np.mean(np.abs(x0[:half] - x0[partners[:half]])))


def evaluate(obs: Observation, x0: np.ndarray) -> MetricReport:
    """ Measures the constraint error and, for even dimensions, the mirror coherence error. """
    mean_abs, max_abs = constraint_error(obs, x0)
    coherence = coherence_error_mirror(x0) if obs.dim % 2 == 0 else None
    return MetricReport(constraint_mean_abs=mean_abs, constraint_max_abs=max_abs, coherence_error=coherence)


def _deterministic_runs(schedule: NoiseSchedule, denoiser: Denoiser, n_runs: int,
                        rng: np.random.Generator) -> List[List[DdimStepResult]]:
    if n_runs < 1:
        raise ValueError(f'n_runs must be at least 1, got {n_runs}')
    deterministic = schedule if schedule.eta == 0.0 else schedule.with_eta(0.0)
    return [ddim_trajectory(deterministic, denoiser, rng.standard_normal(denoiser.dim), None) for _ in range(n_runs)]


def gap_trajectory(schedule: NoiseSchedule, denoiser: Denoiser, n_runs: int,
                   rng: np.random.Generator) -> List[Tuple[int, float]]:
    """
    Measures how far the one-step estimate f^(t)(X_t) is from the final sample X_0 along
    unconditional deterministic DDIM trajectories started from X_T ~ N(0, I).

    :return: Pairs (t, mean over runs of ||f^(t)(X_t) - X_0|| / sqrt(N)) for t = T, ..., 1.
    """
    runs = _deterministic_runs(schedule, denoiser, n_runs, rng)
    scale = np.sqrt(denoiser.dim)
    gaps = np.array([[np.linalg.norm(step.x0_hat - run[-1].x_prev) / scale for step in run] for run in runs])
    curve = [(t, float(g)) for t, g in zip(schedule.steps_descending, gaps.mean(axis=0))]
    logger.debug('gap at T %.4g, at 1 %.4g', curve[0][1], curve[-1][1])
    return curve


def calibrate_xi_curve(schedule: NoiseSchedule, denoiser: Denoiser, obs: Observation, n_samples: int,
                       rng: np.random.Generator) -> List[Tuple[int, float]]:
    """
    Estimates the constraint variance (1/N) E ||r(f^(t)(X_t)) - r(X_0)||^2 of every step by Monte
    Carlo over unconditional deterministic trajectories.

    :return: Pairs (t, estimate) for t = T, ..., 1.
    """
    runs = _deterministic_runs(schedule, denoiser, n_samples, rng)
    apply = obs.operator.apply
    squared = np.array([[np.sum((apply(step.x0_hat) - apply(run[-1].x_prev)) ** 2) for step in run] for run in runs])
    estimates = squared.mean(axis=0) / denoiser.dim
    return [(t, float(v)) for t, v in zip(schedule.steps_descending, estimates)]


def calibrate_xi(schedule: NoiseSchedule, denoiser: Denoiser, obs: Observation, t: int, n_samples: int,
                 rng: np.random.Generator) -> float:
    """ Estimates the constraint variance of a single step t, see calibrate_xi_curve. """
    t = StepValidator.validate_step(t, 1, schedule.T)
    return calibrate_xi_curve(schedule, denoiser, obs, n_samples, rng)[schedule.T - t][1]
