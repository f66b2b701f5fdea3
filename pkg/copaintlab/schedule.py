import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from copaintlab.errors import ScheduleError
from copaintlab.util import StepValidator, frozen_array

logger = logging.getLogger(__name__)

DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02
DEFAULT_TRAIN_STEPS = 1000


@dataclass(frozen=True, slots=True, kw_only=True)
class ScheduleSpec:
    """
    The parameter tuple a schedule is rebuilt from. Run manifests store this tuple instead of
    raw float arrays.
    """

    train_steps: int
    """ The step count of the linear source schedule. """
    beta_start: float = DEFAULT_BETA_START
    """ The first beta value of the linear source schedule. """
    beta_end: float = DEFAULT_BETA_END
    """ The last beta value of the linear source schedule. """
    eta: float = 0.0
    """ The DDIM variance knob. 0 is deterministic DDIM, 1 matches the DDPM variances. """
    steps: Optional[Tuple[int, ...]] = None
    """ The selected source indices of a subsequence, or None for the full source schedule. """

    def build(self) -> 'NoiseSchedule':
        """ Rebuilds the schedule described by this spec. """
        schedule = build_linear_schedule(self.train_steps, self.beta_start, self.beta_end, self.eta)
        if self.steps is not None:
            schedule = subsequence(schedule, list(self.steps))
        return schedule

    def to_dict(self) -> Dict[str, Any]:
        return {
            'train_steps': self.train_steps,
            'beta_start': self.beta_start,
            'beta_end': self.beta_end,
            'eta': self.eta,
            'steps': None if self.steps is None else list(self.steps),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ScheduleSpec':
        steps = data.get('steps')
        return cls(
            train_steps=int(data['train_steps']),
            beta_start=float(data['beta_start']),
            beta_end=float(data['beta_end']),
            eta=float(data['eta']),
            steps=None if steps is None else tuple(int(s) for s in steps),
        )


@dataclass(frozen=True, slots=True, kw_only=True, eq=False)
class NoiseSchedule:
    """
    A diffusion noise schedule together with the DDIM standard deviations.

    All sequences are numpy arrays of length T + 1 that are indexed by the step t directly.
    Index 0 holds the conventions alpha_bar[0] = 1, beta[0] = 0 and sigma[0] = 0.
    The arrays are read-only, so a schedule can be shared by concurrent runs.
    """

    T: int
    """ The number of steps. """
    beta: np.ndarray
    """ Per step variances beta_t in (0, 1). """
    alpha: np.ndarray
    """ Per step retention factors alpha_t = 1 - beta_t. """
    alpha_bar: np.ndarray
    """ Cumulative products of alpha_t, strictly decreasing in t. """
    sigma: np.ndarray
    """ DDIM standard deviations sigma_t with sigma_1 = 0. """
    eta: float
    """ The DDIM variance knob the sigmas were computed with. """
    model_steps: Tuple[int, ...]
    """ For every step t the step index of the schedule the denoiser was built on. """
    spec: Optional[ScheduleSpec] = field(default=None, compare=False)
    """ The parameter tuple to rebuild this schedule, if it was built from one. """

    def __post_init__(self):
        self._validate()

    def _validate(self) -> None:
        if self.T < 1:
            raise ScheduleError(f'T must be at least 1, got {self.T}')
        for name in ('beta', 'alpha', 'alpha_bar', 'sigma'):
            if getattr(self, name).shape != (self.T + 1,):
                raise ScheduleError(f'{name} must have length T + 1 = {self.T + 1}')
        if len(self.model_steps) != self.T + 1:
            raise ScheduleError(f'model_steps must have length T + 1 = {self.T + 1}')

        beta = self.beta[1:]
        if not np.all((beta > 0.0) & (beta < 1.0)):
            raise ScheduleError('beta values must lie in (0, 1)')
        if self.alpha_bar[0] != 1.0:
            raise ScheduleError('alpha_bar[0] must be 1')
        if not np.all(np.diff(self.alpha_bar) < 0.0):
            raise ScheduleError('alpha_bar must be strictly decreasing')
        if not 0.0 < self.alpha_bar[-1] < 1.0:
            raise ScheduleError(f'alpha_bar[T] must lie in (0, 1), got {self.alpha_bar[-1]}')
        if self.sigma[1] != 0.0:
            raise ScheduleError('sigma_1 must be 0')

        bound = 1.0 - self.alpha_bar[:-1]
        excess = self.sigma[1:] ** 2 - bound
        if np.any(excess > 1e-12 * np.maximum(bound, 1e-300)):
            t = int(np.argmax(excess)) + 1
            raise ScheduleError(f'sigma_{t}^2 exceeds 1 - alpha_bar_{t - 1}')

    @property
    def steps_descending(self) -> range:
        """ The steps T, T - 1, ..., 1 of a reverse pass. """
        return range(self.T, 0, -1)

    def model_step(self, t: int) -> int:
        """ Maps a step of this schedule to the step index of the denoiser's schedule. """
        StepValidator.validate_step(t, 0, self.T)
        return self.model_steps[t]

    def with_eta(self, eta: float) -> 'NoiseSchedule':
        """
        Returns the same schedule with the sigmas recomputed for another variance knob.
        :param eta: The new DDIM variance knob in [0, 1].
        """
        spec = None
        if self.spec is not None:
            spec = ScheduleSpec(train_steps=self.spec.train_steps, beta_start=self.spec.beta_start,
                                beta_end=self.spec.beta_end, eta=eta, steps=self.spec.steps)
        return _from_alpha_bar(self.alpha_bar, eta, model_steps=self.model_steps, spec=spec, beta=self.beta)

    @classmethod
    def from_alpha_bar(cls, alpha_bar: Sequence[float], eta: float = 0.0) -> 'NoiseSchedule':
        """
        Creates a schedule from its cumulative products.

        :param alpha_bar: The values alpha_bar_1, ..., alpha_bar_T. The alpha_bar_0 = 1 convention is
          prepended.
        :param eta: The DDIM variance knob.
        """
        values = np.concatenate([[1.0], np.asarray(alpha_bar, dtype=np.float64)])
        return _from_alpha_bar(values, eta, model_steps=tuple(range(len(values))))


def ddim_sigma(alpha_bar_prev: np.ndarray, alpha_bar: np.ndarray, eta: float,
               beta: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Computes the DDIM standard deviations
    sigma = eta * sqrt((1 - alpha_bar_prev) / (1 - alpha_bar)) * sqrt(1 - alpha_bar / alpha_bar_prev).

    :param alpha_bar_prev: The cumulative products of the previous steps.
    :param alpha_bar: The cumulative products of the current steps.
    :param eta: The DDIM variance knob.
    :param beta: Optional per step variances. For consecutive steps 1 - alpha_bar / alpha_bar_prev equals
      beta, which avoids cancellation for small betas.
    :return: The standard deviations.
    """
    ratio_complement = 1.0 - alpha_bar / alpha_bar_prev if beta is None else beta
    return eta * np.sqrt((1.0 - alpha_bar_prev) / (1.0 - alpha_bar)) * np.sqrt(ratio_complement)


def _validate_eta(eta: float) -> float:
    if not 0.0 <= eta <= 1.0:
        raise ScheduleError(f'eta must lie in [0, 1], got {eta}')
    return float(eta)


def _from_alpha_bar(alpha_bar: np.ndarray, eta: float, model_steps: Tuple[int, ...],
                    spec: Optional[ScheduleSpec] = None, beta: Optional[np.ndarray] = None) -> NoiseSchedule:
    eta = _validate_eta(eta)
    T = len(alpha_bar) - 1
    if T < 1:
        raise ScheduleError('a schedule needs at least one step')
    if beta is None:
        beta = np.concatenate([[0.0], 1.0 - alpha_bar[1:] / alpha_bar[:-1]])

    sigma = np.zeros(T + 1)
    if T >= 2:
        sigma[2:] = ddim_sigma(alpha_bar[1:-1], alpha_bar[2:], eta, beta=beta[2:])

    return NoiseSchedule(
        T=T,
        beta=frozen_array(beta),
        alpha=frozen_array(1.0 - beta),
        alpha_bar=frozen_array(alpha_bar),
        sigma=frozen_array(sigma),
        eta=eta,
        model_steps=tuple(int(s) for s in model_steps),
        spec=spec,
    )


def build_linear_schedule(T: int, beta_start: float = DEFAULT_BETA_START, beta_end: float = DEFAULT_BETA_END,
                          eta: float = 0.0) -> NoiseSchedule:
    """
    Builds a schedule with betas linearly spaced from beta_start to beta_end.

    :param T: The number of steps.
    :param beta_start: The variance of the first step.
    :param beta_end: The variance of the last step.
    :param eta: The DDIM variance knob in [0, 1]. 0 yields deterministic DDIM, 1 the DDPM-matched variances.
    :return: A validated noise schedule.
    """
    if isinstance(T, bool) or not isinstance(T, (int, np.integer)) or T < 1:
        raise ScheduleError(f'T must be a positive integer, got {T!r}')
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ScheduleError(f'betas must satisfy 0 < beta_start <= beta_end < 1, '
                            f'got beta_start={beta_start}, beta_end={beta_end}')

    beta = np.concatenate([[0.0], np.linspace(beta_start, beta_end, int(T), dtype=np.float64)])
    alpha_bar = np.cumprod(1.0 - beta)
    spec = ScheduleSpec(train_steps=int(T), beta_start=float(beta_start), beta_end=float(beta_end), eta=float(eta))
    return _from_alpha_bar(alpha_bar, eta, model_steps=tuple(range(int(T) + 1)), spec=spec, beta=beta)


def subsequence(schedule: NoiseSchedule, steps: Sequence[int]) -> NoiseSchedule:
    """
    Restricts a schedule to a sub-grid of its steps. The sigmas are recomputed over consecutive
    selected pairs with the eta of the source schedule.

    :param schedule: The source schedule.
    :param steps: Strictly increasing step indices of the source schedule ending at its T.
    :return: A schedule with len(steps) steps whose alpha_bar values are the source's at the selected indices.
    """
    steps = StepValidator.validate_step_list(steps, schedule.T)
    alpha_bar = np.concatenate([[1.0], schedule.alpha_bar[steps]])
    model_steps = (0, *(schedule.model_steps[s] for s in steps))

    spec = None
    if schedule.spec is not None and schedule.spec.steps is None:
        spec = ScheduleSpec(train_steps=schedule.spec.train_steps, beta_start=schedule.spec.beta_start,
                            beta_end=schedule.spec.beta_end, eta=schedule.eta, steps=tuple(steps))

    beta = None
    if steps == list(range(1, schedule.T + 1)):
        beta = schedule.beta
    return _from_alpha_bar(alpha_bar, schedule.eta, model_steps=model_steps, spec=spec, beta=beta)


def evenly_spaced_steps(source_T: int, count: int) -> List[int]:
    """
    Selects count evenly spaced step indices of a schedule with source_T steps, ending at source_T.
    E.g. 250 indices of 1000 steps are 4, 8, ..., 1000.
    """
    if not 1 <= count <= source_T:
        raise ScheduleError(f'cannot select {count} steps from a schedule with {source_T} steps')
    return [i * source_T // count for i in range(1, count + 1)]


def sampling_schedule(T: int, train_steps: int = DEFAULT_TRAIN_STEPS, beta_start: float = DEFAULT_BETA_START,
                      beta_end: float = DEFAULT_BETA_END, eta: float = 0.0) -> Tuple[NoiseSchedule, NoiseSchedule]:
    """
    Builds the training schedule and the T-step sampling sub-grid on top of it.

    :return: The pair (training schedule, sampling schedule).
    """
    train = build_linear_schedule(train_steps, beta_start, beta_end, eta)
    if T == train_steps:
        return train, train
    logger.debug('sampling %d of %d training steps', T, train_steps)
    return train, subsequence(train, evenly_spaced_steps(train_steps, T))
