"""Binary file formats for nets and rollout state.

All multi-byte fields are little-endian. Parameter files carry a 4-byte magic,
a u32 version, then named float64 arrays in sorted-name order so identical
parameters always serialize to identical bytes.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import StateError

VERSION = 1
MAGIC_NET = b"EWNT"
MAGIC_FUSION = b"EWFU"
MAGIC_STATE = b"EWRS"


def params_to_bytes(magic: bytes, params: dict[str, np.ndarray]) -> bytes:
    parts = [struct.pack("<4sII", magic, VERSION, len(params))]
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
        parts.append(arr.tobytes())
    return b"".join(parts)


def params_from_bytes(blob: bytes, magic: bytes) -> dict[str, np.ndarray]:
    got, version, count = struct.unpack_from("<4sII", blob)
    if got != magic:
        raise StateError(f"bad parameter file magic {got!r}, expected {magic!r}")
    if version != VERSION:
        raise StateError(f"unsupported parameter file version {version}")
    off = struct.calcsize("<4sII")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", blob, off) if ndim else ()
        off += 4 * ndim
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape)
        off += n * 8
        out[name] = arr.astype(np.float64)
    return out


def save_params(path, magic: bytes, params: dict[str, np.ndarray]):
    with open(path, "wb") as fh:
        fh.write(params_to_bytes(magic, params))


def load_params(path, magic: bytes) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return params_from_bytes(fh.read(), magic)


def pack_blob(tag: bytes, blob: bytes) -> bytes:
    """Length-prefixed section used inside rollout-state snapshots."""
    return struct.pack("<4sQ", tag, len(blob)) + blob


def unpack_blobs(blob: bytes, offset: int = 0) -> dict[bytes, bytes]:
    out: dict[bytes, bytes] = {}
    while offset < len(blob):
        tag, size = struct.unpack_from("<4sQ", blob, offset)
        offset += struct.calcsize("<4sQ")
        out[tag] = blob[offset:offset + size]
        offset += size
    return out
