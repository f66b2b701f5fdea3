from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np

from copaintlab.errors import ConfigError, DimensionError, FormatError, UnsupportedOperatorError
from copaintlab.util import as_vector, ensure_finite


class RevealKind(Enum):
    """
    Enum of the reveal operator kinds.
    """

    PIXEL_MASK = 'pixel-mask'
    """
    Selects a subset of the coordinates.
    """
    AVG_POOL = 'avg-pool'
    """
    Averages disjoint blocks of k coordinates (1-D) or k x k pixels (2-D).
    """


@dataclass(frozen=True, slots=True)
class Geometry:
    """ The layout of a state vector: a 1-D length or a 2-D grid stored row-major. """

    shape: Tuple[int, ...]

    def __post_init__(self):
        if len(self.shape) not in (1, 2) or any(s < 1 for s in self.shape):
            raise DimensionError(f'geometry must be a positive length or a positive H x W grid, got {self.shape}')

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def is_grid(self) -> bool:
        return len(self.shape) == 2

    def __str__(self) -> str:
        return 'x'.join(str(s) for s in self.shape)

    @classmethod
    def parse(cls, text: str) -> 'Geometry':
        """ Parses '16' or '4x4'. """
        try:
            return cls(tuple(int(part) for part in str(text).lower().split('x')))
        except ValueError:
            raise DimensionError(f"geometry must look like '16' or '4x4', got {text!r}") from None


class RevealOperator:
    """
    The linear reveal operator r of the inpainting constraint r(X_0) = s_0.

    A pixel mask selects the revealed coordinates in ascending index order. An average pooling
    operator maps every block to its mean; for a grid geometry the blocks are k x k pixels and the
    block means are stored row-major.
    Operators are immutable.
    """

    def __init__(self, kind: RevealKind, geometry: Geometry, mask: Optional[np.ndarray] = None, factor: int = 1):
        """
        Creates a new RevealOperator object. Use pixel_mask or avg_pool instead.
        """
        self._kind: RevealKind = kind
        self._geometry: Geometry = geometry
        self._factor: int = int(factor)
        self._mask: Optional[np.ndarray] = None
        self._indices: Optional[np.ndarray] = None

        if kind is RevealKind.PIXEL_MASK:
            mask = np.array(mask, dtype=bool)
            if mask.shape != (geometry.size,):
                raise DimensionError(f'mask has shape {mask.shape}, geometry needs {geometry.size} entries')
            mask.setflags(write=False)
            self._mask = mask
            self._indices = np.flatnonzero(mask)
            self._indices.setflags(write=False)
        else:
            if self._factor < 1:
                raise DimensionError(f'pooling factor must be positive, got {factor}')
            if any(s % self._factor != 0 for s in geometry.shape):
                raise DimensionError(f'pooling factor {factor} does not divide geometry {geometry}')

    @classmethod
    def pixel_mask(cls, mask, geometry: Optional[Geometry] = None) -> 'RevealOperator':
        """
        Creates a coordinate selection operator.

        :param mask: Boolean vector, True marks a revealed coordinate.
        :param geometry: The state layout. Defaults to a 1-D geometry of the mask length.
        """
        mask = np.asarray(mask, dtype=bool).ravel()
        geometry = geometry if geometry is not None else Geometry((mask.shape[0],))
        return cls(RevealKind.PIXEL_MASK, geometry, mask=mask)

    @classmethod
    def avg_pool(cls, factor: int, geometry: Geometry) -> 'RevealOperator':
        """
        Creates an average pooling operator.

        :param factor: The block size k.
        :param geometry: The state layout. For a grid the blocks are k x k.
        """
        return cls(RevealKind.AVG_POOL, geometry, factor=factor)

    @property
    def kind(self) -> RevealKind:
        return self._kind

    @property
    def geometry(self) -> Geometry:
        return self._geometry

    @property
    def mask(self) -> Optional[np.ndarray]:
        """ Gets the boolean reveal mask, None for average pooling. """
        return self._mask

    @property
    def factor(self) -> int:
        return self._factor

    @property
    def input_dim(self) -> int:
        return self._geometry.size

    @property
    def output_dim(self) -> int:
        if self._kind is RevealKind.PIXEL_MASK:
            return int(self._indices.shape[0])
        return self._geometry.size // self._factor ** len(self._geometry.shape)

    def _pooled_shape(self) -> Tuple[int, ...]:
        return tuple(s // self._factor for s in self._geometry.shape)

    def apply(self, x: np.ndarray) -> np.ndarray:
        """ Computes r(x). """
        x = as_vector(x, self.input_dim)
        if self._kind is RevealKind.PIXEL_MASK:
            return x[self._indices]
        k = self._factor
        if self._geometry.is_grid:
            h, w = self._pooled_shape()
            return x.reshape(h, k, w, k).mean(axis=(1, 3)).ravel()
        return x.reshape(-1, k).mean(axis=1)

    def adjoint(self, v: np.ndarray) -> np.ndarray:
        """
        Computes the transpose r^T v: a scatter into the revealed coordinates for pixel masks, every
        block filled with v_i / k (or v_i / k^2 on a grid) for average pooling.
        """
        v = as_vector(v, self.output_dim, name='v')
        if self._kind is RevealKind.PIXEL_MASK:
            out = np.zeros(self.input_dim)
            out[self._indices] = v
            return out
        return self._replicate(v) / self._factor ** len(self._geometry.shape)

    def pseudo_inverse(self, v: np.ndarray) -> np.ndarray:
        """
        Computes the Moore-Penrose pseudo-inverse r^+ v, so that r(r^+ v) = v. Equals adjoint for pixel
        masks and block replication for average pooling.
        """
        v = as_vector(v, self.output_dim, name='v')
        if self._kind is RevealKind.PIXEL_MASK:
            return self.adjoint(v)
        return self._replicate(v)

    def _replicate(self, v: np.ndarray) -> np.ndarray:
        k = self._factor
        if self._geometry.is_grid:
            blocks = v.reshape(self._pooled_shape())
            return np.repeat(np.repeat(blocks, k, axis=0), k, axis=1).ravel()
        return np.repeat(v, k)

    def project(self, x: np.ndarray, s0: np.ndarray) -> np.ndarray:
        """
        Overwrites the revealed coordinates of x with s0.
        :raises UnsupportedOperatorError: For average pooling operators.
        """
        if self._kind is not RevealKind.PIXEL_MASK:
            raise UnsupportedOperatorError('coordinate-wise projection needs a pixel mask operator')
        x = as_vector(x, self.input_dim).copy()
        x[self._indices] = as_vector(s0, self.output_dim, name='s0')
        return x

    def to_dict(self) -> Dict[str, Any]:
        data = {'kind': self._kind.value, 'shape': list(self._geometry.shape)}
        if self._kind is RevealKind.PIXEL_MASK:
            data['mask'] = mask_bits(self._mask)
        else:
            data['factor'] = self._factor
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'RevealOperator':
        try:
            geometry = Geometry(tuple(int(s) for s in data['shape']))
            kind = RevealKind(data['kind'])
            if kind is RevealKind.PIXEL_MASK:
                return cls.pixel_mask(parse_mask_bits(data['mask']), geometry)
            return cls.avg_pool(int(data['factor']), geometry)
        except (KeyError, ValueError, TypeError) as e:
            raise FormatError(f'malformed reveal operator description: {e}') from None

    def __eq__(self, other):
        if not isinstance(other, RevealOperator):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def __hash__(self):
        return hash(str(self.to_dict()))

    def __repr__(self):
        if self._kind is RevealKind.PIXEL_MASK:
            return f'RevealOperator(pixel-mask, {self.output_dim}/{self.input_dim} revealed)'
        return f'RevealOperator(avg-pool, k={self._factor}, geometry={self._geometry})'


@dataclass(frozen=True, slots=True, eq=False)
class Observation:
    """ The revealed data s_0 together with its reveal operator. """

    s0: np.ndarray
    operator: RevealOperator

    def __post_init__(self):
        s0 = np.array(as_vector(self.s0, name='s0'))
        if s0.shape[0] != self.operator.output_dim:
            raise DimensionError(f's0 has length {s0.shape[0]}, operator reveals {self.operator.output_dim} values')
        ensure_finite(s0, 'observation')
        s0.setflags(write=False)
        object.__setattr__(self, 's0', s0)

    @classmethod
    def from_reference(cls, operator: RevealOperator, x_ref: np.ndarray) -> 'Observation':
        """ Creates the observation s0 = r(x_ref). """
        return cls(operator.apply(x_ref), operator)

    @property
    def dim(self) -> int:
        """ Gets the state dimension N. """
        return self.operator.input_dim

    def residual(self, x: np.ndarray) -> np.ndarray:
        """ Computes s0 - r(x). """
        return self.s0 - self.operator.apply(x)

    def to_dict(self) -> Dict[str, Any]:
        return {'operator': self.operator.to_dict(), 's0': [float(v) for v in self.s0]}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'Observation':
        return cls(np.array(data['s0'], dtype=np.float64), RevealOperator.from_dict(data['operator']))


MASK_NAMES = ('expand', 'half', 'altern', 'sr', 'narrow', 'wide', 'text', 'all', 'none')


def _band(length: int, width: int, rng: np.random.Generator) -> slice:
    width = min(max(width, 1), length)
    start = int(rng.integers(0, length - width + 1))
    return slice(start, start + width)


def standard_masks(name: str, geometry: Geometry, seed: int = 0) -> RevealOperator:
    """
    Creates one of the standard degradations for a geometry. A True mask entry is revealed.

    * half: the first half of the coordinates (the top half of a grid).
    * altern: every other coordinate, starting with the first.
    * expand: only the central quarter (the central H/2 x W/2 block of a grid).
    * sr: average pooling with factor 2.
    * narrow, wide: everything except one random contiguous band of width N/8 or N/2 (rows of a grid).
    * text: everything except a pseudo-random scatter of about a fifth of the coordinates.
    * all, none: every or no coordinate.

    :param name: The mask name.
    :param geometry: The state layout.
    :param seed: The seed of the random masks.
    """
    name = name.lower()
    n = geometry.size
    rng = np.random.default_rng(seed)
    if name == 'sr':
        return RevealOperator.avg_pool(2, geometry)

    mask = np.zeros(n, dtype=bool)
    if name == 'half':
        mask[:n // 2] = True
    elif name == 'altern':
        mask[::2] = True
    elif name == 'expand':
        if geometry.is_grid:
            h, w = geometry.shape
            grid = mask.reshape(h, w)
            grid[h // 4:h // 4 + max(h // 2, 1), w // 4:w // 4 + max(w // 2, 1)] = True
        else:
            width = max(n // 4, 1)
            start = (n - width) // 2
            mask[start:start + width] = True
    elif name in ('narrow', 'wide'):
        mask[:] = True
        length = geometry.shape[0]
        band = _band(length, length // 8 if name == 'narrow' else length // 2, rng)
        if geometry.is_grid:
            mask.reshape(geometry.shape)[band, :] = False
        else:
            mask[band] = False
    elif name == 'text':
        mask = rng.random(n) >= 0.2
    elif name == 'all':
        mask[:] = True
    elif name != 'none':
        raise ConfigError(f'unknown mask {name!r}, expected one of {", ".join(MASK_NAMES)}')
    return RevealOperator.pixel_mask(mask, geometry)


def mask_bits(mask: np.ndarray) -> str:
    return ''.join('1' if m else '0' for m in mask)


def parse_mask_bits(bits: str) -> np.ndarray:
    if any(c not in '01' for c in bits):
        raise FormatError("mask bits must be '0' or '1'")
    return np.array([c == '1' for c in bits], dtype=bool)


def mask_to_text(operator: RevealOperator) -> str:
    """ Serializes a pixel mask as 'mask N' followed by a line of N '0'/'1' characters. """
    if operator.kind is not RevealKind.PIXEL_MASK:
        raise UnsupportedOperatorError('only pixel masks have a mask file representation')
    return f'mask {operator.input_dim}\n{mask_bits(operator.mask)}\n'


def mask_from_text(text: str, geometry: Optional[Geometry] = None) -> RevealOperator:
    """ Parses the format written by mask_to_text. """
    lines = text.splitlines()
    if len(lines) < 2:
        raise FormatError('mask file needs a header and a mask line')
    header = lines[0].split()
    if len(header) != 2 or header[0] != 'mask' or not header[1].isdigit():
        raise FormatError(f"expected header 'mask N', got {lines[0]!r}")
    bits = lines[1].strip()
    if len(bits) != int(header[1]):
        raise FormatError(f'mask line has {len(bits)} entries, header says {header[1]}')
    if geometry is not None and geometry.size != len(bits):
        raise DimensionError(f'mask of length {len(bits)} does not fit geometry {geometry}')
    return RevealOperator.pixel_mask(parse_mask_bits(bits), geometry)


def load_mask(path: Union[str, Path], geometry: Optional[Geometry] = None) -> RevealOperator:
    return mask_from_text(Path(path).read_text(encoding='ascii'), geometry)


def save_mask(operator: RevealOperator, path: Union[str, Path]) -> None:
    Path(path).write_text(mask_to_text(operator), encoding='ascii', newline='\n')
