"""Length-prefixed tensor frames exchanged between ranks.

Frame layout (little-endian)::

    b"ADCM" | u32 version=1 | u32 src | u32 dst | u32 buffer id | u32 seq
    | u8 rank | rank x u32 dims | u64 payload length | float32 payload

Buffer id 0 is reserved for the connection greeting, which carries no payload.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from ..errors import ProtocolError

MAGIC = b"ADCM"
VERSION = 1
HELLO = 0
_HEAD = struct.Struct("<4sIIIIIB")
_LEN = struct.Struct("<Q")
F32 = np.dtype("<f4")


@dataclass
class Message:
    src: int
    dst: int
    buffer: int
    seq: int
    data: np.ndarray | None


def encode_header(src: int, dst: int, buffer: int, seq: int, dims) -> bytes:
    dims = tuple(int(d) for d in dims)
    payload = 4 * math.prod(dims) if dims else 0
    return (
        _HEAD.pack(MAGIC, VERSION, src, dst, buffer, seq, len(dims))
        + struct.pack(f"<{len(dims)}I", *dims)
        + _LEN.pack(payload)
    )


def encode_frame(src: int, dst: int, buffer: int, seq: int, data: np.ndarray | None) -> bytes:
    if data is None:
        return encode_header(src, dst, buffer, seq, ())
    arr = np.ascontiguousarray(data, dtype=F32)
    return encode_header(src, dst, buffer, seq, arr.shape) + arr.tobytes()


def hello(src: int, dst: int) -> bytes:
    return encode_frame(src, dst, HELLO, 0, None)


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if data is None or len(data) != n:
        raise EOFError(f"connection closed after {0 if not data else len(data)} of {n} bytes")
    return data


def read_frame(fh) -> Message | None:
    """Read one frame from a binary file object; ``None`` on clean EOF."""
    first = fh.read(_HEAD.size)
    if not first:
        return None
    if len(first) != _HEAD.size:
        raise ProtocolError("truncated frame header")
    magic, version, src, dst, buf, seq, rank = _HEAD.unpack(first)
    if magic != MAGIC:
        raise ProtocolError(f"bad frame magic {magic!r}")
    if version != VERSION:
        raise ProtocolError(f"unsupported frame version {version}")
    try:
        dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank))
        (length,) = _LEN.unpack(_read_exact(fh, _LEN.size))
        expected = 4 * math.prod(dims) if rank else 0
        if length != expected:
            raise ProtocolError(f"payload length {length} does not match dims {list(dims)}")
        if rank and any(d == 0 for d in dims):
            raise ProtocolError(f"zero dimension in frame dims {list(dims)}")
        payload = _read_exact(fh, length)
    except EOFError as exc:
        raise ProtocolError(f"truncated frame: {exc}") from None
    data = np.frombuffer(payload, dtype=F32).reshape(dims).copy() if rank else None
    return Message(src, dst, buf, seq, data)
