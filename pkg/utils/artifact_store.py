"""
On-disk artifact containers and manifests.

Binary container, version 1 (all integers little-endian):

    magic      4 bytes   b"LSFA"
    version    u16       1
    kind       4 bytes   ASCII tag: FEAT, NORM, LSTM, SVMM, VECS
    meta_len   u32       length of the metadata block
    meta       bytes     UTF-8 JSON, keys sorted
    n_arrays   u32
    per array (sorted by name):
        name_len u16, name UTF-8
        dtype    u8      1 = float32, 2 = float64, 3 = int64
        ndim     u8
        dims     u64 * ndim
        data     row-major little-endian values
    digest     32 bytes  SHA-256 of every preceding byte

The hex form of the trailing digest is the artifact's content digest.
JSON manifests are written with sorted keys and no timestamps so that a
rerun with identical inputs reproduces them byte for byte.
"""

import hashlib
import json
import logging
import os
import struct
from typing import Any, Dict, Optional, Tuple

import numpy as np

from utils.errors import DataError, MissingArtifactError

logger = logging.getLogger(__name__)

MAGIC = b"LSFA"
VERSION = 1

_DTYPE_CODES = {
    np.dtype("<f4"): 1,
    np.dtype("<f8"): 2,
    np.dtype("<i8"): 3,
}
_CODE_DTYPES = {code: dtype for dtype, code in _DTYPE_CODES.items()}


def _normalise_array(array: np.ndarray) -> np.ndarray:
    array = np.asarray(array)
    if array.dtype.kind == "f":
        dtype = np.dtype("<f4") if array.dtype.itemsize == 4 else np.dtype("<f8")
    elif array.dtype.kind in "iub":
        dtype = np.dtype("<i8")
    else:
        raise TypeError(f"cannot store array of dtype {array.dtype}")
    return np.ascontiguousarray(array, dtype=dtype)


def encode_container(kind: str, arrays: Dict[str, np.ndarray], meta: Dict[str, Any]) -> bytes:
    tag = kind.encode("ascii")
    if len(tag) != 4:
        raise ValueError(f"container kind must be 4 ASCII characters, got '{kind}'")

    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<H", VERSION), tag,
             struct.pack("<I", len(meta_bytes)), meta_bytes,
             struct.pack("<I", len(arrays))]

    for name in sorted(arrays):
        array = _normalise_array(arrays[name])
        name_bytes = name.encode("utf-8")
        parts.append(struct.pack("<H", len(name_bytes)))
        parts.append(name_bytes)
        parts.append(struct.pack("<BB", _DTYPE_CODES[array.dtype], array.ndim))
        parts.append(struct.pack(f"<{array.ndim}Q", *array.shape))
        parts.append(array.tobytes(order="C"))

    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def decode_container(data: bytes) -> Tuple[str, Dict[str, np.ndarray], Dict[str, Any]]:
    if len(data) < 4 + 2 + 4 + 4 + 4 + 32 or data[:4] != MAGIC:
        raise DataError("not an LSF artifact container (bad magic)")

    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise DataError("artifact digest mismatch: file is corrupt or was modified")

    (version,) = struct.unpack_from("<H", body, 4)
    if version != VERSION:
        raise DataError(f"unsupported artifact container version {version}")

    kind = body[6:10].decode("ascii")
    offset = 10
    (meta_len,) = struct.unpack_from("<I", body, offset)
    offset += 4
    meta = json.loads(body[offset:offset + meta_len].decode("utf-8"))
    offset += meta_len
    (n_arrays,) = struct.unpack_from("<I", body, offset)
    offset += 4

    arrays: Dict[str, np.ndarray] = {}
    for _ in range(n_arrays):
        (name_len,) = struct.unpack_from("<H", body, offset)
        offset += 2
        name = body[offset:offset + name_len].decode("utf-8")
        offset += name_len
        code, ndim = struct.unpack_from("<BB", body, offset)
        offset += 2
        shape = struct.unpack_from(f"<{ndim}Q", body, offset)
        offset += 8 * ndim
        dtype = _CODE_DTYPES.get(code)
        if dtype is None:
            raise DataError(f"unknown dtype code {code} for array '{name}'")
        count = int(np.prod(shape)) if ndim else 1
        nbytes = count * dtype.itemsize
        if offset + nbytes > len(body):
            raise DataError(f"array '{name}' is truncated")
        arrays[name] = np.frombuffer(body, dtype=dtype, count=count, offset=offset).reshape(shape).copy()
        offset += nbytes

    return kind, arrays, meta


def write_container(path: str, kind: str, arrays: Dict[str, np.ndarray], meta: Dict[str, Any]) -> str:
    """Write a container and return its content digest (hex)"""
    data = encode_container(kind, arrays, meta)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as handle:
        handle.write(data)
    digest = data[-32:].hex()
    logger.debug(f"💾 Wrote {kind} container {path} ({len(data)} bytes, digest {digest[:12]})")
    return digest


def read_container(path: str, expected_kind: Optional[str] = None,
                   stage: Optional[str] = None) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    if not os.path.exists(path):
        if stage:
            raise MissingArtifactError(os.path.basename(path), stage)
        raise FileNotFoundError(path)
    with open(path, "rb") as handle:
        kind, arrays, meta = decode_container(handle.read())
    if expected_kind and kind != expected_kind:
        raise DataError(f"{path}: expected a {expected_kind} container, found {kind}")
    return arrays, meta


def container_digest(path: str) -> str:
    with open(path, "rb") as handle:
        handle.seek(-32, os.SEEK_END)
        return handle.read(32).hex()


def file_digest(path: str) -> str:
    sha = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            sha.update(chunk)
    return sha.hexdigest()


def json_digest(obj: Any) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode("utf-8")).hexdigest()


def write_json(path: str, obj: Any) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    text = json.dumps(obj, sort_keys=True, indent=2) + "\n"
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(text)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def read_json(path: str, stage: Optional[str] = None) -> Any:
    if not os.path.exists(path):
        if stage:
            raise MissingArtifactError(os.path.basename(path), stage)
        raise FileNotFoundError(path)
    with open(path, "r", encoding="utf-8") as handle:
        return json.load(handle)
