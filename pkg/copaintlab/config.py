import dataclasses
import logging
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

from copaintlab.conditioning import RevealKind, RevealOperator
from copaintlab.errors import ConfigError
from copaintlab.schedule import DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_TRAIN_STEPS

logger = logging.getLogger(__name__)


@dataclass(frozen=True, slots=True, kw_only=True)
class CoPaintConfig:
    """
    The hyperparameters of all samplers. The defaults are the published CoPaint-TT settings.
    """

    T: int = 250
    """ The number of sampling steps. """
    G: int = 2
    """ The gradient descent steps per visited time step. """
    eta0: float = 0.02
    """ The base learning rate, the step size at t is eta0 * sqrt(alpha_bar_t). """
    xi_decay: float = 1.012
    """ The geometric base of the constraint variance xi'_t^2 = xi_decay^-(T - t). """
    tau: int = 10
    """ The time travel interval. """
    K: int = 1
    """ The time travel frequency, the number of rewinds per interval. 0 disables time travel. """
    H: int = 1
    """ The number of grid steps of the X_0 estimate inside the loss. """
    sigma_eta: float = 0.0
    """ The DDIM variance knob of the sampling schedule. """
    seed: int = 0
    """ The seed of the run's random generator. """
    final_projection: Optional[bool] = None
    """ Whether the revealed coordinates of X_0 are set to s_0 exactly. None means true for pixel masks. """
    train_steps: int = DEFAULT_TRAIN_STEPS
    """ The step count of the training schedule the sampling steps are selected from. """
    beta_start: float = DEFAULT_BETA_START
    beta_end: float = DEFAULT_BETA_END
    prototype_lr: float = 5e-7
    """ The fixed learning rate of the full rollout optimizer. """
    prototype_xi: float = 1e-3
    """ The constraint standard deviation xi_T of the full rollout optimizer. """
    prototype_steps: int = 200
    """ The gradient steps of the full rollout optimizer. """
    prototype_max_T: int = 100
    """ The largest T the full rollout optimizer accepts. """

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        """ Checks every value range. """
        self._validate_int('T', 1)
        self._validate_int('G', 0)
        self._validate_int('tau', 1)
        self._validate_int('K', 0)
        self._validate_int('H', 1)
        self._validate_int('seed', 0)
        self._validate_int('train_steps', 1)
        self._validate_int('prototype_steps', 0)
        self._validate_int('prototype_max_T', 1)
        for name in ('eta0', 'xi_decay', 'prototype_lr', 'prototype_xi'):
            if not getattr(self, name) > 0.0:
                raise ConfigError(f'{name} must be positive, got {getattr(self, name)}')
        if not 0.0 <= self.sigma_eta <= 1.0:
            raise ConfigError(f'sigma_eta must lie in [0, 1], got {self.sigma_eta}')
        if not 0.0 < self.beta_start <= self.beta_end < 1.0:
            raise ConfigError(f'betas must satisfy 0 < beta_start <= beta_end < 1, '
                              f'got {self.beta_start}, {self.beta_end}')
        if self.T > self.train_steps:
            raise ConfigError(f'T={self.T} exceeds train_steps={self.train_steps}')
        if self.final_projection not in (None, True, False):
            raise ConfigError(f'final_projection must be true, false or auto, got {self.final_projection!r}')

    def _validate_int(self, name: str, minimum: int) -> None:
        value = getattr(self, name)
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f'{name} must be integer, not {type(value).__name__}')
        if value < minimum:
            raise ConfigError(f'{name} must be at least {minimum}, got {value}')

    def projection_enabled(self, operator: RevealOperator) -> bool:
        """ Resolves final_projection for an operator: automatic means on for pixel masks only. """
        if self.final_projection is None:
            return operator.kind is RevealKind.PIXEL_MASK
        return self.final_projection

    def replace(self, **changes) -> 'CoPaintConfig':
        """ Returns a copy with the given fields changed. """
        unknown = set(changes) - FIELD_NAMES
        if unknown:
            raise ConfigError(f'unknown config keys: {", ".join(sorted(unknown))}')
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> Dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> 'CoPaintConfig':
        unknown = set(data) - FIELD_NAMES
        if unknown:
            raise ConfigError(f'unknown config keys: {", ".join(sorted(unknown))}')
        return cls(**data)


FIELD_NAMES = frozenset(f.name for f in fields(CoPaintConfig))

PRESETS: Dict[str, Dict[str, Any]] = {
    'copaint': {'K': 0},
    'copaint-tt': {},
    'copaint-fast': {'G': 1, 'T': 100, 'K': 0},
    'onestep': {'K': 0},
    'prototype': {'T': 20, 'K': 0},
    'blended': {'G': 0, 'K': 0, 'sigma_eta': 1.0},
    'ddnm': {'G': 0, 'K': 0, 'sigma_eta': 1.0},
    'repaint-lite': {'G': 0, 'sigma_eta': 1.0},
}
""" The named method presets. Each preset name is also the name of the method it runs. """


def preset(name: str) -> CoPaintConfig:
    """
    Gets the config of a named preset.
    :raises ConfigError: If the preset is unknown.
    """
    try:
        overrides = PRESETS[name]
    except KeyError:
        raise ConfigError(f'unknown preset {name!r}, expected one of {", ".join(PRESETS)}') from None
    return CoPaintConfig(**overrides)


def _parse_bool(text: str) -> Optional[bool]:
    lowered = text.lower()
    if lowered in ('true', 'yes', 'on', '1'):
        return True
    if lowered in ('false', 'no', 'off', '0'):
        return False
    if lowered in ('auto', 'none'):
        return None
    raise ValueError(f'not a boolean: {text!r}')


_PARSERS = {
    int: int,
    float: float,
    Optional[bool]: _parse_bool,
}
_FIELD_TYPES = {f.name: f.type for f in fields(CoPaintConfig)}


def coerce_value(key: str, text: str) -> Any:
    """
    Converts the text of a config value to the type of the CoPaintConfig field.
    :raises ConfigError: For unknown keys and unparsable values.
    """
    if key not in _FIELD_TYPES:
        raise ConfigError(f'unknown config key {key!r}')
    try:
        return _PARSERS[_FIELD_TYPES[key]](text.strip())
    except ValueError:
        raise ConfigError(f'invalid value {text!r} for {key}') from None


def parse_config_text(text: str) -> Dict[str, Any]:
    """
    Parses flat 'key = value' lines. Blank lines and '#' comments are ignored.
    :return: The coerced values by key.
    """
    values = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise ConfigError(f"line {number}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split('=', 1))
        values[key] = coerce_value(key, value)
    return values


def load_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    try:
        text = Path(path).read_text(encoding='utf-8')
    except OSError as e:
        raise ConfigError(f'cannot read config file {path}: {e.strerror}') from None
    return parse_config_text(text)


def build_config(preset_name: str, file_values: Optional[Mapping[str, Any]] = None,
                 overrides: Optional[Mapping[str, Any]] = None) -> CoPaintConfig:
    """
    Combines a preset, config file values and explicit overrides; later sources win.

    :param preset_name: The method preset.
    :param file_values: Values parsed from a config file.
    :param overrides: Explicit values, e.g. from command line flags. None entries are skipped.
    """
    preset(preset_name)
    values = dict(PRESETS[preset_name])
    values.update(file_values or {})
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    config = CoPaintConfig.from_dict(values)
    logger.debug('config for %s: %s', preset_name, config)
    return config
