import csv
import io
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from copaintlab.conditioning import Geometry
from copaintlab.errors import DimensionError, FormatError
from copaintlab.util import as_vector

PathLike = Union[str, Path]


def atomic_write_bytes(path: PathLike, data: bytes) -> None:
    """ Writes a file via a temporary sibling and a rename, so readers never see a partial file. """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f'.{path.name}.', suffix='.tmp')
    try:
        with os.fdopen(fd, 'wb') as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode('utf-8'))


def values_to_pixels(x: np.ndarray) -> np.ndarray:
    """ Maps values to 8-bit pixels with round(clamp(x, -1, 1) * 127.5 + 127.5). """
    return np.rint(np.clip(x, -1.0, 1.0) * 127.5 + 127.5).astype(np.uint8)


def pixels_to_values(pixels: np.ndarray) -> np.ndarray:
    """ Maps 8-bit pixels p to p / 127.5 - 1. """
    return np.asarray(pixels, dtype=np.float64) / 127.5 - 1.0


def _pgm_tokens(data: bytes, count: int) -> Tuple[List[bytes], int]:
    """ Reads count whitespace separated header tokens, skipping comments. Returns tokens and the body offset. """
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise FormatError('truncated PGM header')
        if data[pos:pos + 1] == b'#':
            end = data.find(b'\n', pos)
            pos = len(data) if end < 0 else end + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def decode_pgm(data: bytes) -> Tuple[np.ndarray, Geometry]:
    """
    Decodes an 8-bit binary PGM (P5) image.
    :return: The pixels mapped to [-1, 1] in row-major order and the H x W geometry.
    """
    tokens, offset = _pgm_tokens(data, 4)
    if tokens[0] != b'P5':
        raise FormatError(f'only binary PGM (P5) images are supported, got {tokens[0]!r}')
    try:
        width, height, max_value = (int(token) for token in tokens[1:])
    except ValueError:
        raise FormatError('malformed PGM header') from None
    if max_value != 255:
        raise FormatError(f'only 8-bit PGM images are supported, got maxval {max_value}')
    raster = data[offset:offset + width * height]
    if len(raster) != width * height:
        raise FormatError(f'PGM raster has {len(raster)} bytes, expected {width * height}')
    return pixels_to_values(np.frombuffer(raster, dtype=np.uint8)), Geometry((height, width))


def encode_pgm(x: np.ndarray, geometry: Geometry) -> bytes:
    if not geometry.is_grid:
        raise DimensionError('PGM images need a 2-D geometry')
    x = as_vector(x, geometry.size)
    height, width = geometry.shape
    return f'P5\n{width} {height}\n255\n'.encode('ascii') + values_to_pixels(x).tobytes()


def read_pgm(path: PathLike) -> Tuple[np.ndarray, Geometry]:
    return decode_pgm(Path(path).read_bytes())


def write_pgm(path: PathLike, x: np.ndarray, geometry: Geometry) -> None:
    atomic_write_bytes(path, encode_pgm(x, geometry))


def vector_to_text(x: np.ndarray) -> str:
    """ Serializes a vector as 'vec N' followed by one float per line. """
    x = as_vector(x)
    return f'vec {x.shape[0]}\n' + ''.join(f'{float(v)!r}\n' for v in x)


def vector_from_text(text: str) -> np.ndarray:
    lines = [line.strip() for line in text.splitlines() if line.strip()]
    if not lines:
        raise FormatError('empty vector file')
    header = lines[0].split()
    if len(header) != 2 or header[0] != 'vec' or not header[1].isdigit():
        raise FormatError(f"expected header 'vec N', got {lines[0]!r}")
    if len(lines) - 1 != int(header[1]):
        raise FormatError(f'vector file has {len(lines) - 1} values, header says {header[1]}')
    try:
        return np.array([float(line) for line in lines[1:]], dtype=np.float64)
    except ValueError as e:
        raise FormatError(f'malformed vector value: {e}') from None


def read_vector(path: PathLike) -> np.ndarray:
    return vector_from_text(Path(path).read_text(encoding='ascii'))


def write_vector(path: PathLike, x: np.ndarray) -> None:
    atomic_write_text(path, vector_to_text(x))


def read_state(path: PathLike) -> Tuple[np.ndarray, Geometry]:
    """ Reads a PGM image (by the .pgm suffix) or a vector file. """
    if Path(path).suffix.lower() == '.pgm':
        return read_pgm(path)
    x = read_vector(path)
    return x, Geometry((x.shape[0],))


def write_state(path: PathLike, x: np.ndarray, geometry: Geometry) -> Path:
    """ Writes x as PGM image for grid geometries, as vector file otherwise. Returns the written path. """
    path = Path(path)
    if geometry.is_grid:
        path = path.with_suffix('.pgm')
        write_pgm(path, x, geometry)
    else:
        path = path.with_suffix('.vec')
        write_vector(path, x)
    return path


def csv_text(header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator='\n')
    writer.writerow(header)
    writer.writerows(rows)
    return buffer.getvalue()


def write_csv(path: PathLike, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    """ Writes a CSV file with a header row and LF line endings. """
    atomic_write_text(path, csv_text(header, rows))


def read_csv(path: PathLike) -> List[Dict[str, str]]:
    with open(path, newline='', encoding='utf-8') as f:
        return list(csv.DictReader(f))


def write_json(path: PathLike, data: Dict[str, Any]) -> None:
    atomic_write_text(path, json.dumps(data, indent=2, sort_keys=True) + '\n')


def read_json(path: PathLike) -> Dict[str, Any]:
    try:
        with open(path, encoding='utf-8') as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise FormatError(f'malformed JSON in {path}: {e}') from None


@dataclass(slots=True, kw_only=True)
class RunManifest:
    """ Everything needed to repeat a run. """

    method: str
    config: dict
    """ All CoPaintConfig fields. """
    schedule: dict
    """ The sampling schedule parameters, see ScheduleSpec. """
    model: dict
    """ The model source and its identifier. """
    observation: dict
    """ The reveal operator and s0. """
    seed: int
    version: str
    geometry: List[int] = field(default_factory=list)
    input: Optional[str] = None
    """ The reference file the observation was taken from. """
    mask: str = ''
    """ The mask name or mask file the observation was made with. """

    def to_dict(self) -> Dict[str, Any]:
        return {
            'method': self.method,
            'config': self.config,
            'schedule': self.schedule,
            'model': self.model,
            'observation': self.observation,
            'seed': self.seed,
            'version': self.version,
            'geometry': list(self.geometry),
            'input': self.input,
            'mask': self.mask,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'RunManifest':
        try:
            return cls(
                method=str(data['method']),
                config=dict(data['config']),
                schedule=dict(data['schedule']),
                model=dict(data['model']),
                observation=dict(data['observation']),
                seed=int(data['seed']),
                version=str(data['version']),
                geometry=list(data.get('geometry', [])),
                input=data.get('input'),
                mask=str(data.get('mask', '')),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f'malformed run manifest: {e}') from None

    def save(self, path: PathLike) -> None:
        write_json(path, self.to_dict())

    @classmethod
    def load(cls, path: PathLike) -> 'RunManifest':
        return cls.from_dict(read_json(path))
