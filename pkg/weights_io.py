"""
FUSESR01 binary container for named arrays (weights, optimizer moments)

Layout: 8-byte magic, little-endian uint64 manifest length, UTF-8 JSON
manifest, then raw little-endian scalar blocks at the manifest offsets.
"""
import json
import struct
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import numpy as np

from errors import FormatError

MAGIC = b"FUSESR01"
_LENGTH = struct.Struct('<Q')
_DTYPES = {'float32': '<f4', 'float64': '<f8'}


def write_container(path, arrays: Dict[str, np.ndarray], meta: Optional[Dict[str, Any]] = None) -> None:
    """Write named arrays in insertion order"""
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dtype_name = str(arr.dtype)
        if dtype_name not in _DTYPES:
            raise FormatError(f"array '{name}' has unsupported dtype {dtype_name}")
        blob = np.ascontiguousarray(arr, dtype=_DTYPES[dtype_name]).tobytes()
        entries.append({
            'name': name,
            'shape': list(arr.shape),
            'dtype': dtype_name,
            'offset': offset,
            'nbytes': len(blob),
        })
        blobs.append(blob)
        offset += len(blob)

    manifest = json.dumps({'meta': meta or {}, 'tensors': entries}, sort_keys=True).encode('utf-8')
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'wb') as f:
        f.write(MAGIC)
        f.write(_LENGTH.pack(len(manifest)))
        f.write(manifest)
        for blob in blobs:
            f.write(blob)


def read_container(path) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    """Read and validate a container; returns (arrays, meta)"""
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise FormatError(f"cannot read weight container {path}: {e}")

    if raw[:len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:len(MAGIC)]!r}, expected {MAGIC!r}")
    head = len(MAGIC) + _LENGTH.size
    if len(raw) < head:
        raise FormatError(f"{path}: truncated before manifest length")
    (manifest_len,) = _LENGTH.unpack_from(raw, len(MAGIC))
    if head + manifest_len > len(raw):
        raise FormatError(f"{path}: truncated manifest ({manifest_len} bytes declared)")
    try:
        manifest = json.loads(raw[head:head + manifest_len].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: manifest is not valid JSON: {e}")

    data_start = head + manifest_len
    arrays: Dict[str, np.ndarray] = {}
    for entry in manifest.get('tensors', []):
        name = entry['name']
        dtype_name = entry['dtype']
        if dtype_name not in _DTYPES:
            raise FormatError(f"{path}: tensor '{name}' has unsupported dtype {dtype_name}")
        shape = tuple(entry['shape'])
        dtype = np.dtype(_DTYPES[dtype_name])
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if entry['nbytes'] != expected:
            raise FormatError(f"{path}: tensor '{name}' declares {entry['nbytes']} bytes, shape needs {expected}")
        start = data_start + entry['offset']
        if start + expected > len(raw):
            raise FormatError(f"{path}: truncated data for tensor '{name}'")
        arr = np.frombuffer(raw, dtype=dtype, count=expected // dtype.itemsize, offset=start)
        arrays[name] = arr.reshape(shape).astype(dtype_name)
    return arrays, manifest.get('meta', {})
