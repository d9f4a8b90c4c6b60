"""Input tensor files: 8-bit binary PGM and raw little-endian float32 blobs."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ParseError, ShapeError


def _pgm_tokens(data: bytes, count: int):
    """First ``count`` header tokens of a PGM file and the offset after them."""
    tokens, i = [], 0
    while len(tokens) < count:
        while i < len(data) and data[i:i + 1].isspace():
            i += 1
        if data[i:i + 1] == b"#":
            while i < len(data) and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(data) and not data[j:j + 1].isspace() and data[j:j + 1] != b"#":
            j += 1
        if j == i:
            raise ParseError("truncated PGM header")
        tokens.append(data[i:j])
        i = j
    return tokens, i + 1  # exactly one whitespace byte follows maxval


def read_pgm(path) -> np.ndarray:
    """Binary (P5) PGM as a float32 [H, W] array scaled linearly to [0, 1]."""
    data = Path(path).read_bytes()
    tokens, off = _pgm_tokens(data, 4)
    if tokens[0] != b"P5":
        raise ParseError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ParseError(f"{path}: bad PGM header") from None
    if w < 1 or h < 1 or not 1 <= maxval <= 65535:
        raise ParseError(f"{path}: bad PGM dimensions or maxval")
    dtype = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
    need = w * h * dtype.itemsize
    if len(data) - off < need:
        raise ParseError(f"{path}: PGM payload has {len(data) - off} bytes, need {need}")
    pix = np.frombuffer(data, dtype=dtype, count=w * h, offset=off).reshape(h, w)
    return (pix.astype(np.float64) / maxval).astype(np.float32)


def write_pgm(path, img) -> None:
    """Write a [H, W] array of values in [0, 1] as an 8-bit P5 PGM."""
    img = np.asarray(img)
    pix = np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)
    h, w = pix.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + pix.tobytes())


def read_raw(path, shape) -> np.ndarray:
    data = Path(path).read_bytes()
    n = int(np.prod(shape))
    if len(data) != 4 * n:
        raise ShapeError("input", f"{path} holds {len(data)} bytes, shape {list(shape)} needs {4 * n}")
    return np.frombuffer(data, dtype="<f4").reshape(shape).astype(np.float32)


def write_raw(path, x) -> None:
    Path(path).write_bytes(np.ascontiguousarray(x, dtype="<f4").tobytes())


def read_input(path, shape, fmt: str = "auto") -> np.ndarray:
    """Load an input tensor of ``shape`` ([1, C, H, W] for images).

    PGM images are grey; they are repeated across channels when C > 1.
    """
    shape = tuple(shape)
    if fmt == "auto":
        with open(path, "rb") as fh:
            fmt = "pgm" if fh.read(2) == b"P5" else "raw"
    if fmt == "raw":
        return read_raw(path, shape)
    if fmt != "pgm":
        raise ValueError(f"unknown input format {fmt!r}")
    img = read_pgm(path)
    if len(shape) != 4 or shape[0] != 1 or img.shape != shape[2:]:
        raise ShapeError("input", f"PGM image is {list(img.shape)}, model expects {list(shape)}")
    return np.ascontiguousarray(np.broadcast_to(img, shape), dtype=np.float32)
