"""Self-describing tensor container used for spectrum caches and checkpoints.

Layout::

    8 bytes   magic (e.g. b"JSCNSPC1")
    8 bytes   manifest length, unsigned little-endian
    n bytes   UTF-8 JSON manifest (sorted keys)
    ...       tensors as little-endian float64, row-major, in manifest order

The manifest has a ``tensors`` list of ``{name, shape, dtype}`` entries and a
free-form ``meta`` object.
"""

import json
import struct

import numpy as np

from .errors import DataError

SPECTRUM_MAGIC = b"JSCNSPC1"
CHECKPOINT_MAGIC = b"JSCNCKP1"

_LEN = struct.Struct("<Q")
_DTYPE = np.dtype("<f8")


def dumps_json(obj):
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def write_container(path, magic, tensors, meta=None):
    if len(magic) != 8:
        raise ValueError("magic must be exactly 8 bytes")
    entries = []
    blobs = []
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype=_DTYPE)
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "float64"})
        blobs.append(arr.tobytes(order="C"))
    manifest = dumps_json({"meta": meta or {}, "tensors": entries}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(_LEN.pack(len(manifest)))
        fh.write(manifest)
        for blob in blobs:
            fh.write(blob)


def read_container(path, magic):
    """Return ``(tensors, meta)``; tensors keep manifest order."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != magic:
        raise DataError(f"{path}: bad magic {raw[:8]!r}, expected {magic!r}")
    if len(raw) < 16:
        raise DataError(f"{path}: truncated header")
    (n,) = _LEN.unpack(raw[8:16])
    try:
        manifest = json.loads(raw[16:16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: unreadable manifest: {exc}") from exc
    offset = 16 + n
    tensors = {}
    for entry in manifest["tensors"]:
        if entry.get("dtype") != "float64":
            raise DataError(f"{path}: unsupported dtype {entry.get('dtype')!r}")
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + 8 * count
        if end > len(raw):
            raise DataError(f"{path}: tensor {entry['name']!r} is truncated")
        tensors[entry["name"]] = np.frombuffer(raw[offset:end], dtype=_DTYPE).astype(np.float64).reshape(shape)
        offset = end
    return tensors, manifest.get("meta", {})
