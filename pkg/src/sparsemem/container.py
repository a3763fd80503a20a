"""Versioned binary container for state snapshots and checkpoints.

Layout: an 8-byte magic, a format version, then a sequence of named
sections. Every array section stores its dtype code, shape and raw
little-endian bytes, so files round-trip bit-exactly across platforms.
"""

from __future__ import annotations

import io
import json
import struct

import numpy as np

MAGIC = b"SPMEMBIN"
VERSION = 1

_DTYPES = {
    "f8": np.dtype("<f8"),
    "i8": np.dtype("<i8"),
    "u1": np.dtype("<u1"),
}
_CODES = {v: k for k, v in _DTYPES.items()}


class ContainerError(ValueError):
    pass


def _write_blob(buf: io.BytesIO, name: str, kind: bytes, payload: bytes) -> None:
    nm = name.encode("utf-8")
    if len(nm) > 0xFFFF:
        raise ContainerError("section name too long")
    buf.write(struct.pack("<H", len(nm)))
    buf.write(nm)
    buf.write(kind)
    buf.write(struct.pack("<Q", len(payload)))
    buf.write(payload)


def dump(sections: dict) -> bytes:
    """Serialize a dict of numpy arrays / ints / json-able objects."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(struct.pack("<I", len(sections)))
    for name, value in sections.items():
        if isinstance(value, np.ndarray):
            arr = np.ascontiguousarray(value)
            code = None
            for c, dt in _DTYPES.items():
                if arr.dtype == dt or arr.dtype == dt.newbyteorder(">"):
                    code = c
                    break
            if code is None:
                if np.issubdtype(arr.dtype, np.floating):
                    arr, code = arr.astype("<f8"), "f8"
                elif np.issubdtype(arr.dtype, np.integer):
                    arr, code = arr.astype("<i8"), "i8"
                else:
                    raise ContainerError(f"unsupported dtype {arr.dtype} in section {name!r}")
            arr = arr.astype(_DTYPES[code], copy=False)
            head = struct.pack("<B", len(arr.shape)) + struct.pack(
                f"<{len(arr.shape)}q", *arr.shape
            )
            _write_blob(buf, name, b"A" + code.encode(), head + arr.tobytes())
        elif isinstance(value, (int, np.integer)):
            _write_blob(buf, name, b"I..", struct.pack("<q", int(value)))
        elif isinstance(value, bytes):
            _write_blob(buf, name, b"B..", value)
        else:
            _write_blob(buf, name, b"J..", json.dumps(value, sort_keys=True).encode())
    return buf.getvalue()


def load(blob: bytes) -> dict:
    """Inverse of dump. Raises ContainerError on malformed input."""
    buf = io.BytesIO(blob)
    if buf.read(8) != MAGIC:
        raise ContainerError("bad magic")
    (version,) = struct.unpack("<I", buf.read(4))
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    (count,) = struct.unpack("<I", buf.read(4))
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", buf.read(2))
        name = buf.read(nlen).decode("utf-8")
        kind = buf.read(3)
        (plen,) = struct.unpack("<Q", buf.read(8))
        payload = buf.read(plen)
        if len(payload) != plen:
            raise ContainerError("truncated container")
        if kind[:1] == b"A":
            code = kind[1:].decode()
            if code not in _DTYPES:
                raise ContainerError(f"unknown array code {code!r}")
            ndim = payload[0]
            shape = struct.unpack(f"<{ndim}q", payload[1 : 1 + 8 * ndim])
            arr = np.frombuffer(payload[1 + 8 * ndim :], dtype=_DTYPES[code]).reshape(shape)
            out[name] = arr.copy()
        elif kind == b"I..":
            (out[name],) = struct.unpack("<q", payload)
        elif kind == b"B..":
            out[name] = payload
        elif kind == b"J..":
            out[name] = json.loads(payload.decode())
        else:
            raise ContainerError(f"unknown section kind {kind!r}")
    return out


def save_file(path, sections: dict) -> None:
    import os
    import tempfile

    blob = dump(sections)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def load_file(path) -> dict:
    with open(path, "rb") as f:
        return load(f.read())
