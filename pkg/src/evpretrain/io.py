"""Binary containers for dense arrays and checkpoints.

Dense array file::

    b"DARR" | u32 version | u16 name_len | name utf-8 | 4-byte dtype tag b"f32<"
    | u32 ndim | u32 dims... | float32 little-endian row-major payload

Checkpoint (bundle) file::

    b"EVCK" | u32 version | u32 header_len | JSON header utf-8
    | payloads of header["arrays"] in order, each float32 little-endian

The JSON header lists ``{"name", "shape"}`` per array plus free-form metadata
(optimizer state, step counter, architecture).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

ARRAY_MAGIC = b"DARR"
BUNDLE_MAGIC = b"EVCK"
VERSION = 1
DTYPE_TAG = b"f32<"


class FormatError(ValueError):
    pass


def encode_array(name: str, arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    nb = name.encode("utf-8")
    head = ARRAY_MAGIC + struct.pack("<IH", VERSION, len(nb)) + nb + DTYPE_TAG
    head += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def decode_array(buf: bytes) -> tuple[str, np.ndarray]:
    if buf[:4] != ARRAY_MAGIC:
        raise FormatError("not a dense array file")
    version, nlen = struct.unpack_from("<IH", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported array version {version}")
    off = 10
    name = buf[off:off + nlen].decode("utf-8")
    off += nlen
    if buf[off:off + 4] != DTYPE_TAG:
        raise FormatError(f"unsupported dtype tag {buf[off:off + 4]!r}")
    off += 4
    (ndim,) = struct.unpack_from("<I", buf, off)
    off += 4
    shape = struct.unpack_from(f"<{ndim}I", buf, off)
    off += 4 * ndim
    n = int(np.prod(shape)) if ndim else 1
    if len(buf) - off != 4 * n:
        raise FormatError("payload size does not match shape")
    arr = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(shape)
    return name, arr.astype(np.float64)


def write_array(path: str | Path, name: str, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode_array(name, arr))


def read_array(path: str | Path) -> tuple[str, np.ndarray]:
    return decode_array(Path(path).read_bytes())


def write_bundle(path: str | Path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    header = dict(meta or {})
    index = []
    payload = []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f4")
        index.append({"name": name, "shape": list(a.shape)})
        payload.append(a.tobytes())
    header["arrays"] = index
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(BUNDLE_MAGIC + struct.pack("<II", VERSION, len(hb)) + hb)
        for p in payload:
            fh.write(p)


def read_bundle(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    buf = Path(path).read_bytes()
    if buf[:4] != BUNDLE_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    header = json.loads(buf[12:12 + hlen].decode("utf-8"))
    off = 12 + hlen
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape))
        arrays[entry["name"]] = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(shape).astype(np.float64)
        off += 4 * n
    if off != len(buf):
        raise FormatError("trailing bytes in checkpoint")
    return arrays, header
