"""Binary Netpbm I/O: 8-bit P6 colour images and P5 graymaps."""
from __future__ import annotations

import os
from pathlib import Path

import numpy as np

_WHITESPACE = b" \t\n\r\v\f"


class NetpbmError(ValueError):
    """Malformed Netpbm data; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int, path: str | None = None):
        where = f"{path}: " if path else ""
        super().__init__(f"{where}byte {offset}: {message}")
        self.offset = offset
        self.path = path


def encode(pixels: np.ndarray) -> bytes:
    """Serialize ``H x W`` (P5) or ``H x W x 3`` (P6) uint8 pixels."""
    if pixels.dtype != np.uint8:
        raise TypeError(f"expected uint8 pixels, got {pixels.dtype}")
    if pixels.ndim == 2:
        magic = b"P5"
    elif pixels.ndim == 3 and pixels.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot encode array of shape {pixels.shape}")
    h, w = pixels.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(pixels).tobytes()


def decode(data: bytes, path: str | None = None) -> np.ndarray:
    pos = 0

    def skip_space_and_comments():
        nonlocal pos
        while pos < len(data):
            c = data[pos:pos + 1]
            if c == b"#":
                end = data.find(b"\n", pos)
                pos = len(data) if end < 0 else end + 1
            elif c in _WHITESPACE:
                pos += 1
            else:
                break

    def read_int(name: str) -> tuple[int, int]:
        """Returns the value and the offset where its digits start."""
        nonlocal pos
        skip_space_and_comments()
        start = pos
        while pos < len(data) and data[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            what = "end of file" if pos >= len(data) else repr(data[pos:pos + 1])
            raise NetpbmError(f"expected {name}, found {what}", start, path)
        return int(data[start:pos]), start

    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise NetpbmError(f"bad magic {magic!r}, expected P5 or P6", 0, path)
    pos = 2
    if pos >= len(data) or data[pos:pos + 1] not in _WHITESPACE:
        raise NetpbmError("missing whitespace after magic", pos, path)
    width, width_at = read_int("width")
    height, height_at = read_int("height")
    maxval, maxval_at = read_int("maxval")
    if width < 1 or height < 1:
        raise NetpbmError(f"non-positive size {width}x{height}", width_at if width < 1 else height_at, path)
    if maxval != 255:
        raise NetpbmError(f"only 8-bit files (maxval 255) are supported, got {maxval}", maxval_at, path)
    if pos >= len(data) or data[pos:pos + 1] not in _WHITESPACE:
        raise NetpbmError("missing whitespace after maxval", pos, path)
    pos += 1
    channels = 3 if magic == b"P6" else 1
    need = width * height * channels
    payload = data[pos:]
    if len(payload) < need:
        raise NetpbmError(f"truncated payload: {len(payload)} of {need} bytes", len(data), path)
    if len(payload) > need:
        raise NetpbmError(f"{len(payload) - need} unexpected trailing bytes", pos + need, path)
    arr = np.frombuffer(payload, dtype=np.uint8)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return arr.reshape(shape).copy()


def _read(path) -> tuple[np.ndarray, str]:
    p = os.fspath(path)
    return decode(Path(p).read_bytes(), p), p


def write_image(path, image: np.ndarray) -> None:
    """Write an ``H x W x 3`` image (uint8, or float in [0, 1]) as P6."""
    if image.dtype != np.uint8:
        image = to_uint8(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"write_image expects H x W x 3, got {image.shape}")
    Path(path).write_bytes(encode(image))


def read_image(path) -> np.ndarray:
    arr, p = _read(path)
    if arr.ndim != 3:
        raise NetpbmError("expected a P6 colour image", 0, p)
    return arr


def write_mask(path, mask: np.ndarray) -> None:
    """Write a binary mask as P5 with values 0 / 255."""
    m = np.asarray(mask)
    if m.ndim != 2 or not np.all((m == 0) | (m == 1)):
        raise ValueError("write_mask expects a 2-D array of 0/1 values")
    Path(path).write_bytes(encode((m.astype(np.uint8) * 255)))


def read_mask(path) -> np.ndarray:
    arr, p = _read(path)
    if arr.ndim != 2:
        raise NetpbmError("expected a P5 graymap", 0, p)
    bad = np.flatnonzero((arr != 0) & (arr != 255))
    if bad.size:
        header = len(Path(p).read_bytes()) - arr.size
        raise NetpbmError(f"mask value {arr.flat[bad[0]]} is neither 0 nor 255", header + int(bad[0]), p)
    return (arr == 255).astype(np.uint8)


def write_gray(path, values: np.ndarray) -> None:
    """Write a 2-D uint8 array (or floats in [0, 1]) as P5."""
    if values.dtype != np.uint8:
        values = to_uint8(values)
    Path(path).write_bytes(encode(values))


def read_gray(path) -> np.ndarray:
    arr, p = _read(path)
    if arr.ndim != 2:
        raise NetpbmError("expected a P5 graymap", 0, p)
    return arr


def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(x, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
