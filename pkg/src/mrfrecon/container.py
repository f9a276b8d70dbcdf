"""Single-file tensor container used for every on-disk artifact.

Layout (little-endian)::

    b"MRFT" | version:u32 | n_records:u32
    repeated n_records times:
        name_len:u16 | name:utf-8 | dtype:u8 | rank:u8 | dims:u64 * rank | data

dtype codes: 1 = float64, 2 = complex128, 3 = int64, 4 = uint8. Data is raw
row-major. Metadata is a JSON document stored as a uint8 record named
``__meta__``. Boolean arrays are stored as uint8 and are not restored to bool
automatically (callers know which arrays are masks).
"""

import hashlib
import json
import os
import struct

import numpy as np

from .errors import ValidationError

MAGIC = b"MRFT"
VERSION = 1
META_KEY = "__meta__"

_CODE_TO_DTYPE = {
    1: np.dtype("<f8"),
    2: np.dtype("<c16"),
    3: np.dtype("<i8"),
    4: np.dtype("u1"),
}


def _code_for(arr):
    kind = arr.dtype.kind
    if kind == "b":
        return 4, arr.astype(np.uint8)
    if kind == "u" and arr.dtype.itemsize == 1:
        return 4, arr
    if kind in "iu":
        return 3, arr.astype("<i8")
    if kind == "f":
        return 1, arr.astype("<f8")
    if kind == "c":
        return 2, arr.astype("<c16")
    raise ValidationError(f"unsupported dtype {arr.dtype} for container storage")


def encode(arrays, meta=None):
    """Serialize a mapping of named arrays (plus optional metadata) to bytes."""
    records = list(arrays.items())
    if meta is not None:
        blob = json.dumps(meta, sort_keys=True, default=_json_default).encode("utf-8")
        records.append((META_KEY, np.frombuffer(blob, dtype=np.uint8)))
    out = [MAGIC, struct.pack("<II", VERSION, len(records))]
    for name, value in records:
        arr = np.ascontiguousarray(np.asarray(value))
        code, arr = _code_for(arr)
        arr = np.ascontiguousarray(arr)
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF or arr.ndim > 0xFF:
            raise ValidationError(f"record {name!r} cannot be stored")
        out.append(struct.pack("<H", len(raw_name)))
        out.append(raw_name)
        out.append(struct.pack("<BB", code, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(arr.tobytes(order="C"))
    return b"".join(out)


def decode(blob):
    """Inverse of :func:`encode`; returns ``(arrays, meta)``."""
    if blob[:4] != MAGIC:
        raise ValidationError("not a tensor container (bad magic)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise ValidationError(f"unsupported container version {version}")
    pos = 12
    arrays = {}
    meta = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + name_len].decode("utf-8")
            pos += name_len
            code, rank = struct.unpack_from("<BB", blob, pos)
            pos += 2
            dims = struct.unpack_from(f"<{rank}Q", blob, pos)
            pos += 8 * rank
            dtype = _CODE_TO_DTYPE[code]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
            data = np.frombuffer(blob, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos)
            pos += nbytes
            arr = data.reshape(dims).copy()
            if name == META_KEY:
                meta = json.loads(arr.tobytes().decode("utf-8"))
            else:
                arrays[name] = arr
    except (struct.error, KeyError, ValueError) as exc:
        raise ValidationError(f"corrupt tensor container: {exc}") from exc
    return arrays, meta


def save(path, arrays, meta=None):
    """Write a container atomically (temp file + rename)."""
    blob = encode(arrays, meta)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def load(path):
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise ValidationError(f"cannot read {path}: {exc}") from exc
    return decode(blob)


def array_hash(*arrays):
    """Content hash (sha256 hex, 16 chars) of one or more arrays."""
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(np.asarray(a))
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()[:16]


def config_hash(config):
    blob = json.dumps(config, sort_keys=True, default=_json_default).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, float):
        return repr(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")
