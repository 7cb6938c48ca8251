"""ATSR tensor files, 8-bit PNG images and small JSON helpers.

ATSR layout: ``b"ATSR"``, then little-endian u32 version (1), ndim, each dim,
dtype code (0 = f32, 1 = f64), then raw little-endian row-major data.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

MAGIC = b"ATSR"
VERSION = 1
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class FormatError(ValueError):
    pass


def encode_atsr(array: np.ndarray) -> bytes:
    arr = np.asarray(array)
    if arr.dtype not in _CODES:
        arr = arr.astype(np.float32)
    code = _CODES[arr.dtype]
    header = MAGIC + struct.pack(f"<II{arr.ndim}II", VERSION, arr.ndim, *arr.shape, code)
    return header + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def decode_atsr(blob: bytes) -> np.ndarray:
    if blob[:4] != MAGIC:
        raise FormatError("not an ATSR file (bad magic)")
    version, ndim = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise FormatError(f"unsupported ATSR version {version}")
    dims = struct.unpack_from(f"<{ndim}I", blob, 12)
    (code,) = struct.unpack_from("<I", blob, 12 + 4 * ndim)
    if code not in _DTYPES:
        raise FormatError(f"unknown ATSR dtype code {code}")
    offset = 16 + 4 * ndim
    dtype = _DTYPES[code]
    count = int(np.prod(dims)) if ndim else 1
    if len(blob) - offset != count * dtype.itemsize:
        raise FormatError("ATSR payload size does not match header")
    data = np.frombuffer(blob, dtype=dtype, count=count, offset=offset)
    return data.astype(dtype.newbyteorder("="), copy=True).reshape(dims)


def save_atsr(path, array: np.ndarray) -> None:
    Path(path).write_bytes(encode_atsr(array))


def load_atsr(path) -> np.ndarray:
    return decode_atsr(Path(path).read_bytes())


def save_png(path, image: np.ndarray) -> None:
    """Write a [3, H, W] float image in [0, 1] as 8-bit RGB."""
    img = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img.transpose(1, 2, 0), mode="RGB").save(path, format="PNG")


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def load_image(path) -> np.ndarray:
    """Load a [3, H, W] float32 image from ATSR or PNG by extension."""
    path = Path(path)
    if path.suffix.lower() == ".png":
        return load_png(path)
    return load_atsr(path).astype(np.float32)


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())
