"""
Checkpoint file format

    b"GLID" | uint32 version | uint64 header length | JSON header | payload

The header is sorted-key JSON holding a tensor manifest (name, dtype, shape,
offset, nbytes) and run metadata (task, step, config hash, rng state). The
payload is the concatenated little-endian raw bytes of every tensor in
manifest order. Files are written to a temporary sibling and renamed into
place, so a failed save never leaves a partial checkpoint behind.
"""
import json
import logging
import os
import struct
import tempfile
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Union

import numpy as np

from exceptions import CheckpointError
from nn_layers import ParamStore

checkpoint_logger = logging.getLogger('glid.checkpoint')

MAGIC = b'GLID'
FORMAT_VERSION = 1
PREAMBLE = struct.Struct('<4sIQ')
SUPPORTED_DTYPES = ('<f4', '<f8', '<i8')

PathLike = Union[str, Path]


@dataclass
class Checkpoint:
    tensors: 'OrderedDict[str, np.ndarray]' = field(default_factory=OrderedDict)
    metadata: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_store(cls, store: ParamStore, **metadata) -> 'Checkpoint':
        return cls(store.state_dict(), dict(metadata))

    def names(self) -> List[str]:
        return list(self.tensors)

    @property
    def task(self) -> str:
        return self.metadata.get('task', '')

    def same_tensors(self, other: 'Checkpoint') -> bool:
        """Bitwise equality of names, dtypes, shapes and bytes"""
        if list(self.tensors) != list(other.tensors):
            return False
        return all(a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()
                   for a, b in zip(self.tensors.values(), other.tensors.values()))


def _little_endian(array: np.ndarray) -> np.ndarray:
    array = np.ascontiguousarray(array)
    dtype = array.dtype.newbyteorder('<')
    if dtype.str not in SUPPORTED_DTYPES:
        raise CheckpointError(f"Unsupported tensor dtype {array.dtype}")
    return array.astype(dtype, copy=False)


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    manifest = []
    chunks = []
    offset = 0
    for name, array in checkpoint.tensors.items():
        array = _little_endian(array)
        raw = array.tobytes()
        manifest.append({'name': name, 'dtype': array.dtype.str, 'shape': list(array.shape),
                         'offset': offset, 'nbytes': len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({'tensors': manifest, 'metadata': checkpoint.metadata},
                        sort_keys=True, separators=(',', ':')).encode('utf-8')
    return PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(header)) + header + b''.join(chunks)


def save_checkpoint(checkpoint: Checkpoint, path: PathLike) -> Path:
    """Write atomically: temp file in the target directory, fsync, rename"""
    path = Path(path)
    if len(set(checkpoint.tensors)) != len(checkpoint.tensors):
        raise CheckpointError('Duplicate tensor names', path)
    blob = encode_checkpoint(checkpoint)
    path.parent.mkdir(parents=True, exist_ok=True)
    handle, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix='.tmp', dir=str(path.parent))
    try:
        with os.fdopen(handle, 'wb') as fh:
            fh.write(blob)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    checkpoint_logger.info("Checkpoint saved", extra={'path': str(path), 'tensors': len(checkpoint.tensors),
                                                      'bytes': len(blob)})
    return path


def decode_checkpoint(blob: bytes, path: PathLike = None) -> Checkpoint:
    """Validate everything before building any tensor; raises CheckpointError"""
    if len(blob) < PREAMBLE.size:
        raise CheckpointError('File too short for a checkpoint preamble', path)
    magic, version, header_len = PREAMBLE.unpack_from(blob, 0)
    if magic != MAGIC:
        raise CheckpointError(f"Bad magic {magic!r}", path)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"Unknown checkpoint version {version}", path)
    header_end = PREAMBLE.size + header_len
    if header_end > len(blob):
        raise CheckpointError('Header extends past end of file', path)
    try:
        header = json.loads(blob[PREAMBLE.size:header_end].decode('utf-8'))
        manifest = header['tensors']
        metadata = header.get('metadata', {})
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as e:
        raise CheckpointError(f"Corrupt manifest: {e}", path) from None
    if not isinstance(manifest, list) or not isinstance(metadata, dict):
        raise CheckpointError('Corrupt manifest: wrong structure', path)

    payload = memoryview(blob)[header_end:]
    seen = set()
    expected_offset = 0
    plan = []
    for entry in manifest:
        try:
            name = entry['name']
            dtype = np.dtype(entry['dtype'])
            shape = tuple(int(s) for s in entry['shape'])
            offset = int(entry['offset'])
            nbytes = int(entry['nbytes'])
        except (KeyError, TypeError, ValueError) as e:
            raise CheckpointError(f"Corrupt manifest entry: {e}", path) from None
        if name in seen:
            raise CheckpointError(f"Duplicate tensor name {name}", path)
        seen.add(name)
        if dtype.str not in SUPPORTED_DTYPES:
            raise CheckpointError(f"Unsupported dtype {entry['dtype']} for {name}", path)
        if any(s < 0 for s in shape) or nbytes != int(np.prod(shape, dtype=np.int64)) * dtype.itemsize:
            raise CheckpointError(f"Manifest size mismatch for {name}", path)
        if offset != expected_offset:
            raise CheckpointError(f"Non-contiguous offset for {name}", path)
        if offset + nbytes > len(payload):
            raise CheckpointError(f"Extent of {name} overflows payload ({offset + nbytes} > {len(payload)})", path)
        expected_offset = offset + nbytes
        plan.append((name, dtype, shape, offset, nbytes))
    if expected_offset != len(payload):
        raise CheckpointError(f"Payload length {len(payload)} does not match manifest ({expected_offset})", path)

    tensors = OrderedDict()
    for name, dtype, shape, offset, nbytes in plan:
        tensors[name] = np.frombuffer(payload[offset:offset + nbytes], dtype=dtype).reshape(shape).copy()
    return Checkpoint(tensors, metadata)


def load_checkpoint(path: PathLike) -> Checkpoint:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint: {e}", path) from None
    checkpoint = decode_checkpoint(blob, path)
    checkpoint_logger.info("Checkpoint loaded", extra={'path': str(path), 'tensors': len(checkpoint.tensors),
                                                       'task': checkpoint.task})
    return checkpoint
