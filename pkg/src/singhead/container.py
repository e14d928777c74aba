"""Plain-text manifest + raw little-endian float32 payload.

Layout::

    SINGHEAD-ARRAYS 1
    meta <key> <json value>          (any number)
    array <name> <d0>x<d1>x...       (declaration order == payload order)
    end
    <raw float32 little-endian bytes, arrays concatenated>

A scalar-shaped array is declared with the shape ``-``.
"""
import json
import os

import numpy as np

from .errors import DimensionMismatchError, ManifestError, TruncatedError

MAGIC = "SINGHEAD-ARRAYS 1"
_DTYPE = np.dtype("<f4")


def _format_shape(shape):
    return "x".join(str(int(s)) for s in shape) if shape else "-"


def _parse_shape(text):
    if text == "-":
        return ()
    try:
        shape = tuple(int(s) for s in text.split("x"))
    except ValueError:
        raise ManifestError(f"bad array shape {text!r}") from None
    if any(s < 0 for s in shape):
        raise ManifestError(f"negative dimension in shape {text!r}")
    return shape


def dumps(arrays, meta=None):
    lines = [MAGIC]
    for key, value in (meta or {}).items():
        if not key or any(c.isspace() for c in key):
            raise ValueError(f"meta key must be a non-empty token, got {key!r}")
        lines.append(f"meta {key} {json.dumps(value, sort_keys=True)}")
    chunks = []
    for name, arr in arrays.items():
        if not name or any(c.isspace() for c in name):
            raise ValueError(f"array name must be a non-empty token, got {name!r}")
        a = np.asarray(arr, dtype=_DTYPE)
        lines.append(f"array {name} {_format_shape(a.shape)}")
        chunks.append(a.tobytes())
    lines.append("end")
    return ("\n".join(lines) + "\n").encode("utf-8") + b"".join(chunks)


def loads(blob):
    header_end = blob.find(b"\nend\n")
    if header_end < 0:
        raise ManifestError("manifest terminator not found")
    try:
        header = blob[:header_end].decode("utf-8").split("\n")
    except UnicodeDecodeError:
        raise ManifestError("manifest is not valid UTF-8") from None
    if header[0] != MAGIC:
        raise ManifestError(f"bad magic line {header[0]!r}")

    meta, decls = {}, []
    for lineno, line in enumerate(header[1:], start=2):
        parts = line.split(" ", 2)
        if parts[0] == "meta" and len(parts) == 3:
            try:
                meta[parts[1]] = json.loads(parts[2])
            except json.JSONDecodeError:
                raise ManifestError(f"line {lineno}: bad meta value") from None
        elif parts[0] == "array" and len(parts) == 3:
            decls.append((parts[1], _parse_shape(parts[2])))
        else:
            raise ManifestError(f"line {lineno}: unrecognised record {line!r}")

    payload = memoryview(blob)[header_end + len(b"\nend\n"):]
    expected = sum(int(np.prod(shape, dtype=np.int64)) for _, shape in decls) * _DTYPE.itemsize
    if len(payload) < expected:
        raise TruncatedError(f"payload has {len(payload)} bytes, manifest declares {expected}")
    if len(payload) > expected:
        raise DimensionMismatchError(
            f"payload has {len(payload)} bytes, manifest declares only {expected}")

    arrays, offset = {}, 0
    for name, shape in decls:
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(payload, dtype=_DTYPE, count=count, offset=offset)
        arrays[name] = arr.reshape(shape).astype(np.float32)
        offset += count * _DTYPE.itemsize
    return meta, arrays


def write_arrays(path, arrays, meta=None):
    blob = dumps(arrays, meta)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def read_arrays(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
