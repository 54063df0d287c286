"""Binary artifact formats, manifests and the run lock.

All binary files are little-endian and end with a SHA-256 digest of the
preceding bytes; readers reject files whose digest does not match.
"""
import hashlib
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Tuple

import numpy as np

from ..errors import ArtifactIOError, SchemaError, StaleHashError
from .geo import GridField, GridSpec
from .observations import ObservationSet, SourceSchema

logger = logging.getLogger(__name__)

GRID_MAGIC = b'OFGR'
OBS_MAGIC = b'OFOB'
CKPT_MAGIC = b'OFCK'
FORMAT_VERSION = 1
_DIGEST = 32


class _Writer:
    def __init__(self):
        self.parts: List[bytes] = []

    def pack(self, fmt: str, *values):
        self.parts.append(struct.pack('<' + fmt, *values))

    def text(self, s: str):
        raw = s.encode('utf-8')
        self.pack('I', len(raw))
        self.parts.append(raw)

    def array(self, a: np.ndarray, dtype: str = '<f4'):
        self.parts.append(np.ascontiguousarray(a, dtype=dtype).tobytes())

    def raw(self, b: bytes):
        self.parts.append(b)

    def finish(self) -> bytes:
        body = b''.join(self.parts)
        return body + hashlib.sha256(body).digest()


class _Reader:
    def __init__(self, data: bytes, path: Path):
        self.data, self.path, self.pos = data, path, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ArtifactIOError(f'{self.path}: truncated file')
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        fmt = '<' + fmt
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def text(self) -> str:
        (n,) = self.unpack('I')
        return self.take(n).decode('utf-8')

    def array(self, count: int, dtype: str = '<f4') -> np.ndarray:
        size = np.dtype(dtype).itemsize * count
        return np.frombuffer(self.take(size), dtype=dtype).astype(np.float64)


def file_sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 20), b''):
            h.update(chunk)
    return h.hexdigest()


def _write_atomic(path: Path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + '.tmp')
    try:
        with open(tmp, 'wb') as f:
            f.write(payload)
        os.replace(tmp, path)
    except OSError as e:
        raise ArtifactIOError(f'cannot write {path}: {e}') from e


def _read_verified(path: Path, magic: bytes) -> _Reader:
    path = Path(path)
    if not path.exists():
        raise ArtifactIOError(f'missing artifact: {path}')
    try:
        data = path.read_bytes()
    except OSError as e:
        raise ArtifactIOError(f'cannot read {path}: {e}') from e
    if len(data) < len(magic) + _DIGEST or data[:len(magic)] != magic:
        raise ArtifactIOError(f'{path}: not a {magic.decode()} file')
    body, digest = data[:-_DIGEST], data[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise ArtifactIOError(f'{path}: checksum mismatch (corrupted or partially written)')
    reader = _Reader(body, path)
    reader.take(len(magic))
    (version,) = reader.unpack('H')
    if version != FORMAT_VERSION:
        raise ArtifactIOError(f'{path}: unsupported format version {version}')
    return reader


# Grid files

def _write_spec(w: _Writer, spec: GridSpec):
    w.pack('5dB', spec.lat_min, spec.lat_max, spec.lon_min, spec.lon_max, spec.res, int(spec.periodic_lon))


def _read_spec(r: _Reader) -> GridSpec:
    lat_min, lat_max, lon_min, lon_max, res, flags = r.unpack('5dB')
    return GridSpec(lat_min, lat_max, lon_min, lon_max, res, bool(flags & 1))


def write_grid(path: Path, field_: GridField) -> str:
    """Write a grid file, return its SHA-256"""
    w = _Writer()
    w.raw(GRID_MAGIC)
    w.pack('H', FORMAT_VERSION)
    _write_spec(w, field_.spec)
    w.pack('i', field_.day)
    w.pack('H', len(field_.variables))
    for name in field_.variables:
        w.text(name)
    w.raw(np.packbits(field_.ocean_mask.ravel()).tobytes())
    w.array(field_.values)
    payload = w.finish()
    _write_atomic(path, payload)
    return hashlib.sha256(payload).hexdigest()


def read_grid(path: Path) -> GridField:
    r = _read_verified(path, GRID_MAGIC)
    spec = _read_spec(r)
    (day,) = r.unpack('i')
    (nv,) = r.unpack('H')
    variables = tuple(r.text() for _ in range(nv))
    n = spec.H * spec.W
    mask = np.unpackbits(np.frombuffer(r.take((n + 7) // 8), dtype=np.uint8))[:n].astype(bool)
    values = r.array(n * nv).reshape(spec.H, spec.W, nv)
    return GridField(spec, variables, values, mask.reshape(spec.shape), day)


def grid_header(path: Path) -> str:
    """Plain-text dump of a grid file's header for debugging"""
    g = read_grid(path)
    ocean = int(g.ocean_mask.sum())
    lines = [
        f'format: OFGR v{FORMAT_VERSION}',
        f'grid: {g.spec.header()}',
        f'day: {g.day}',
        f'variables: {", ".join(g.variables)}',
        f'ocean cells: {ocean} of {g.spec.H * g.spec.W}',
    ]
    for k, name in enumerate(g.variables):
        vals = g.values[..., k][g.ocean_mask]
        if vals.size:
            lines.append(f'  {name}: min={vals.min():.6g} max={vals.max():.6g} mean={vals.mean():.6g}')
    return '\n'.join(lines)


# Observation files

def write_observations(path: Path, obs: ObservationSet) -> str:
    w = _Writer()
    w.raw(OBS_MAGIC)
    w.pack('H', FORMAT_VERSION)
    w.text(obs.schema.source_id)
    w.pack('d', obs.schema.native_res)
    w.pack('iIH', obs.day, obs.n, obs.schema.n_channels)
    w.array(obs.coords)
    w.array(obs.values)
    payload = w.finish()
    _write_atomic(path, payload)
    return hashlib.sha256(payload).hexdigest()


def read_observations(path: Path, schemas: Mapping[str, SourceSchema]) -> ObservationSet:
    r = _read_verified(path, OBS_MAGIC)
    source_id = r.text()
    (native_res,) = r.unpack('d')
    day, n, c = r.unpack('iIH')
    if source_id not in schemas:
        raise SchemaError(f'{path}: unknown source {source_id}')
    schema = schemas[source_id]
    if schema.n_channels != c:
        raise SchemaError(f'{path}: {c} channels on file, schema {source_id} has {schema.n_channels}')
    if abs(schema.native_res - native_res) > 1e-12:
        schema = schema.thinned(native_res)
    coords = r.array(2 * n).reshape(n, 2)
    values = r.array(n * c).reshape(n, c)
    return ObservationSet(schema, coords, values, day)


# Checkpoints

def write_checkpoint(path: Path, tensors: Mapping[str, np.ndarray], config_hash: str,
                     meta: Optional[Dict] = None) -> str:
    w = _Writer()
    w.raw(CKPT_MAGIC)
    w.pack('H', FORMAT_VERSION)
    w.text(config_hash)
    w.text(json.dumps(meta or {}, sort_keys=True))
    w.pack('I', len(tensors))
    for name in sorted(tensors):
        t = np.asarray(tensors[name])
        w.text(name)
        w.pack('B', t.ndim)
        w.pack(f'{t.ndim}I', *t.shape)
        w.array(t)
    payload = w.finish()
    _write_atomic(path, payload)
    logger.debug(f'checkpoint written to {path} ({len(tensors)} tensors)')
    return hashlib.sha256(payload).hexdigest()


def read_checkpoint(path: Path, expected_hash: Optional[str] = None) -> Tuple[Dict[str, np.ndarray], str, Dict]:
    """Returns (tensors as float32, config hash, metadata)"""
    r = _read_verified(path, CKPT_MAGIC)
    config_hash = r.text()
    meta = json.loads(r.text())
    (count,) = r.unpack('I')
    tensors = {}
    for _ in range(count):
        name = r.text()
        (ndim,) = r.unpack('B')
        shape = r.unpack(f'{ndim}I') if ndim else ()
        size = int(np.prod(shape)) if shape else 1
        tensors[name] = r.array(size).astype(np.float32).reshape(shape)
    if expected_hash is not None and expected_hash != config_hash:
        raise StaleHashError(f'{path} was trained under config {config_hash[:12]}, '
                             f'current config is {expected_hash[:12]}')
    return tensors, config_hash, meta


# Manifests

@dataclass
class Manifest:
    """Append-only index of artifacts: key -> (relative path, sha256)"""
    path: Path
    stage: str
    config_hash: str
    entries: Dict[str, Dict[str, str]] = field(default_factory=dict)

    @classmethod
    def open(cls, path: Path, stage: str, config_hash: str) -> 'Manifest':
        path = Path(path)
        if not path.exists():
            return cls(path, stage, config_hash)
        existing = cls.load(path)
        if existing.config_hash != config_hash:
            raise StaleHashError(f'{path} belongs to config {existing.config_hash[:12]}, '
                                 f'refusing to mix with {config_hash[:12]}')
        return existing

    @classmethod
    def load(cls, path: Path, expected_hash: Optional[str] = None) -> 'Manifest':
        path = Path(path)
        if not path.exists():
            raise ArtifactIOError(f'missing manifest: {path}')
        try:
            data = json.loads(path.read_text())
        except (OSError, ValueError) as e:
            raise ArtifactIOError(f'cannot read manifest {path}: {e}') from e
        manifest = cls(path, data['stage'], data['config_hash'], data.get('entries', {}))
        if expected_hash is not None and manifest.config_hash != expected_hash:
            raise StaleHashError(f'{path} was produced under config {manifest.config_hash[:12]}, '
                                 f'current stage hash is {expected_hash[:12]}; regenerate it')
        return manifest

    def add(self, key: str, file_path: Path, digest: str) -> None:
        rel = os.path.relpath(file_path, self.path.parent)
        entry = {'path': rel, 'sha256': digest}
        old = self.entries.get(key)
        if old is not None and old != entry:
            raise ArtifactIOError(f'manifest {self.path}: entry {key} already recorded with a different digest')
        self.entries[key] = entry

    def resolve(self, key: str) -> Path:
        if key not in self.entries:
            raise ArtifactIOError(f'manifest {self.path} has no entry {key}')
        return self.path.parent / self.entries[key]['path']

    def verify(self, key: str) -> Path:
        path = self.resolve(key)
        if not path.exists():
            raise ArtifactIOError(f'missing artifact for {key}: {path}')
        if file_sha256(path) != self.entries[key]['sha256']:
            raise ArtifactIOError(f'checksum mismatch for {key}: {path}')
        return path

    def keys(self) -> Iterable[str]:
        return self.entries.keys()

    def save(self) -> str:
        payload = json.dumps({'stage': self.stage, 'config_hash': self.config_hash,
                              'entries': dict(sorted(self.entries.items()))}, indent=2, sort_keys=True)
        _write_atomic(self.path, payload.encode('utf-8'))
        return hashlib.sha256(payload.encode('utf-8')).hexdigest()


class RunLock:
    """Exclusive lock file on an output directory"""

    def __init__(self, out_dir: Path):
        self.path = Path(out_dir) / '.oceanfuse.lock'
        self._fd: Optional[int] = None

    def __enter__(self) -> 'RunLock':
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            self._fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ArtifactIOError(f'{self.path.parent} is locked by another run ({self.path})') from None
        os.write(self._fd, str(os.getpid()).encode())
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None
        try:
            self.path.unlink()
        except FileNotFoundError:
            pass
