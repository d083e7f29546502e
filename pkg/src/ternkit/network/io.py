"""Image and tensor files: binary PGM (P5) and a raw float32 stack format.

Raw stacks are ``u32 ndim, u32 dims[ndim], float32 data`` (little-endian,
row-major).
"""

from __future__ import annotations

import re
import struct
from pathlib import Path

import numpy as np

from ..errors import DomainError


def write_pgm(path, image) -> None:
    img = np.asarray(image)
    if img.ndim != 2:
        raise DomainError(f"PGM images are 2-D, got shape {img.shape}")
    if img.dtype.kind in "iu" and img.dtype not in (np.uint8, np.uint16):
        if img.size and (img.min() < 0 or img.max() > 65535):
            raise DomainError("PGM pixel values must lie in [0, 65535]")
        img = img.astype(np.uint8 if img.size == 0 or img.max() <= 255 else np.uint16)
    if img.dtype == np.uint8:
        maxval, payload = 255, img.tobytes()
    elif img.dtype == np.uint16:
        maxval, payload = 65535, img.astype(">u2").tobytes()
    else:
        raise DomainError(f"PGM needs uint8 or uint16 pixels, got {img.dtype}")
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n{maxval}\n".encode() + payload)


_PGM_HEADER = re.compile(rb"P5(?:\s+|#[^\n]*\n)+(\d+)\s+(\d+)\s+(\d+)\s")


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    m = _PGM_HEADER.match(data)
    if not m:
        raise DomainError(f"{path}: not a binary PGM file")
    w, h, maxval = (int(g) for g in m.groups())
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    count = w * h
    body = data[m.end() : m.end() + count * np.dtype(dtype).itemsize]
    if len(body) < count * np.dtype(dtype).itemsize:
        raise DomainError(f"{path}: truncated pixel data")
    img = np.frombuffer(body, dtype=dtype).reshape(h, w)
    return img.astype(np.uint16) if maxval >= 256 else img.copy()


def write_tensor(path, x) -> None:
    arr = np.asarray(x, dtype="<f4")
    head = struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    Path(path).write_bytes(head + arr.tobytes())


def read_tensor(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise DomainError(f"{path}: missing tensor header")
    (ndim,) = struct.unpack_from("<I", data)
    if ndim > 8 or len(data) < 4 + 4 * ndim:
        raise DomainError(f"{path}: bad tensor header")
    shape = struct.unpack_from(f"<{ndim}I", data, 4)
    start = 4 + 4 * ndim
    count = int(np.prod(shape))
    if len(data) - start != 4 * count:
        raise DomainError(f"{path}: payload holds {len(data) - start} bytes, shape {shape} needs {4 * count}")
    return np.frombuffer(data, dtype="<f4", offset=start).reshape(shape).astype(np.float32)


def read_stack(path) -> np.ndarray:
    """Load an input stack from a raw tensor or a PGM (single slice, scaled to [0, 1])."""
    path = Path(path)
    with path.open("rb") as fh:
        magic = fh.read(2)
    if magic == b"P5":
        img = read_pgm(path)
        return (img.astype(np.float32) / np.iinfo(img.dtype).max)[None]
    return read_tensor(path)
