from . import denoiser
from .conditioning import Geometry, Observation, RevealKind, RevealOperator, standard_masks
from .config import CoPaintConfig, PRESETS, preset
from .copaint import RunRecord, copaint_run, onestep_run, prototype_run
from .baselines import blended_run, ddnm_run, repaint_lite_run
from .schedule import NoiseSchedule, build_linear_schedule, sampling_schedule, subsequence

__version__ = "0.1.0"
