from copaintlab.denoiser.base import Denoiser
from copaintlab.denoiser.gaussian import GaussianWorld, GaussianDenoiser, mirror_pairs, mirror_world, load_world, \
    save_world
from copaintlab.denoiser.mlp import MlpDenoiser, TrainingConfig, TrainingResult, train_mlp, load_checkpoint, \
    save_checkpoint
