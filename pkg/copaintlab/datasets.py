import logging
from pathlib import Path
from typing import Optional, Union

import numpy as np

from copaintlab.artifacts import read_pgm
from copaintlab.denoiser import GaussianWorld, mirror_pairs
from copaintlab.errors import ConfigError, DimensionError

logger = logging.getLogger(__name__)

DATASET_NAMES = ('mirror', 'gaussian-sample', 'image-dir')


def mirror_dataset(n_samples: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """
    Draws symmetric vectors: the first half uniform in [-1, 1], the second half its mirror image.
    :return: An array of shape (n_samples, dim).
    """
    partners = mirror_pairs(dim)
    half = dim // 2
    samples = np.empty((n_samples, dim))
    samples[:, :half] = rng.uniform(-1.0, 1.0, (n_samples, half))
    samples[:, partners[:half]] = samples[:, :half]
    return samples


def gaussian_sample_dataset(world: GaussianWorld, n_samples: int, rng: np.random.Generator) -> np.ndarray:
    """ Draws from a Gaussian world and clips the draws to [-1, 1]. """
    return np.clip(world.sample(rng, n_samples), -1.0, 1.0)


def image_dir_dataset(directory: Union[str, Path]) -> np.ndarray:
    """
    Loads every PGM image of a directory, sorted by file name, as one row of values in [-1, 1].
    :raises DimensionError: If the images differ in size or there are none.
    """
    paths = sorted(Path(directory).glob('*.pgm'))
    if not paths:
        raise DimensionError(f'no PGM images found in {directory}')
    images = [read_pgm(path) for path in paths]
    geometry = images[0][1]
    for path, (_, other) in zip(paths, images):
        if other != geometry:
            raise DimensionError(f'{path.name} has geometry {other}, expected {geometry}')
    logger.info('loaded %d images of %s from %s', len(images), geometry, directory)
    return np.stack([values for values, _ in images])


def make_dataset(name: str, n_samples: int, dim: Optional[int], rng: np.random.Generator,
                 world: Optional[GaussianWorld] = None, directory: Optional[Union[str, Path]] = None) -> np.ndarray:
    """
    Creates a training dataset by name.

    :param name: One of mirror, gaussian-sample or image-dir.
    :param n_samples: The sample count for the generated datasets.
    :param dim: The dimension of the mirror dataset.
    :param rng: The random generator of the generated datasets.
    :param world: The world of gaussian-sample.
    :param directory: The image directory of image-dir.
    """
    if name == 'mirror':
        if dim is None:
            raise ConfigError('the mirror dataset needs a dimension')
        return mirror_dataset(n_samples, dim, rng)
    if name == 'gaussian-sample':
        if world is None:
            raise ConfigError('the gaussian-sample dataset needs a world file')
        return gaussian_sample_dataset(world, n_samples, rng)
    if name == 'image-dir':
        if directory is None:
            raise ConfigError('the image-dir dataset needs a directory')
        return image_dir_dataset(directory)
    raise ConfigError(f'unknown dataset {name!r}, expected one of {", ".join(DATASET_NAMES)}')
