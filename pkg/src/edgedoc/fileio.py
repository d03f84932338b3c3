"""On-disk formats: BTF tensors, binary PPM/PGM images, atomic writes."""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

BTF_MAGIC = b"BTF1"


class FormatError(ValueError):
    pass


def write_atomic(path: str | os.PathLike, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_text_atomic(path: str | os.PathLike, text: str) -> None:
    write_atomic(path, text.encode("utf-8"))


# -- BTF: "BTF1" | u32 ndim | ndim x u32 dims | f32 LE row-major payload

def encode_btf(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype != np.float32:
        arr = arr.astype(np.float32)
    header = BTF_MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr).astype("<f4", copy=False).tobytes()


def decode_btf(buf: bytes) -> np.ndarray:
    if len(buf) < 8 or buf[:4] != BTF_MAGIC:
        raise FormatError("not a BTF1 file")
    (ndim,) = struct.unpack_from("<I", buf, 4)
    off = 8 + 4 * ndim
    if len(buf) < off:
        raise FormatError("truncated BTF header")
    dims = struct.unpack_from(f"<{ndim}I", buf, 8)
    count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    if len(buf) != off + 4 * count:
        raise FormatError(f"BTF payload size mismatch: expected {count} floats for shape {dims}")
    return np.frombuffer(buf, dtype="<f4", offset=off, count=count).astype(np.float32).reshape(dims)


def save_btf(path, arr: np.ndarray) -> None:
    write_atomic(path, encode_btf(arr))


def load_btf(path) -> np.ndarray:
    return decode_btf(Path(path).read_bytes())


# -- Netpbm (binary, maxval 255)

def encode_ppm(image: np.ndarray) -> bytes:
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[2] != 3:
        raise FormatError(f"PPM needs an HxWx3 uint8 array, got {image.dtype} {image.shape}")
    h, w, _ = image.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + image.tobytes()


def encode_pgm(image: np.ndarray) -> bytes:
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 2:
        raise FormatError(f"PGM needs an HxW uint8 array, got {image.dtype} {image.shape}")
    h, w = image.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + image.tobytes()


def _read_header_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    tokens: list[bytes] = []
    i = 0
    n = len(buf)
    while len(tokens) < count:
        while i < n and buf[i : i + 1].isspace():
            i += 1
        if i < n and buf[i : i + 1] == b"#":
            while i < n and buf[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < n and not buf[i : i + 1].isspace() and buf[i : i + 1] != b"#":
            i += 1
        if start == i:
            raise FormatError("truncated netpbm header")
        tokens.append(buf[start:i])
    # exactly one whitespace byte separates the header from the raster
    return tokens, i + 1


def decode_netpbm(buf: bytes) -> np.ndarray:
    tokens, off = _read_header_tokens(buf, 4)
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"unsupported netpbm magic {magic!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}")
    ch = 3 if magic == b"P6" else 1
    need = w * h * ch
    raster = buf[off : off + need]
    if len(raster) != need:
        raise FormatError("truncated netpbm raster")
    arr = np.frombuffer(raster, dtype=np.uint8).copy()
    return arr.reshape(h, w, 3) if ch == 3 else arr.reshape(h, w)


def save_ppm(path, image: np.ndarray) -> None:
    write_atomic(path, encode_ppm(image))


def save_pgm(path, image: np.ndarray) -> None:
    write_atomic(path, encode_pgm(image))


def load_image(path) -> np.ndarray:
    """Read a P6 (HxWx3) or P5 (HxW) file as uint8."""
    return decode_netpbm(Path(path).read_bytes())
