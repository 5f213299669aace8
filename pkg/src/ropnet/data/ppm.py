"""Binary PPM (P6, maxval 255) reader and writer."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..errors import FormatError

_WHITESPACE = b" \t\n\r\v\f"


def _header_tokens(buf, count):
    """Return ``count`` header tokens and the offset just past the last one.

    Comments run from ``#`` to end of line and may appear anywhere a
    whitespace run may.
    """
    tokens = []
    pos = 0
    n = len(buf)
    while len(tokens) < count:
        while pos < n and (buf[pos] in _WHITESPACE or buf[pos] == ord("#")):
            if buf[pos] == ord("#"):
                while pos < n and buf[pos] not in b"\r\n":
                    pos += 1
            else:
                pos += 1
        start = pos
        while pos < n and buf[pos] not in _WHITESPACE and buf[pos] != ord("#"):
            pos += 1
        if start == pos:
            raise FormatError("truncated PPM header", pos)
        tokens.append((bytes(buf[start:pos]), start))
    return tokens, pos


def decode_ppm(buf: bytes) -> np.ndarray:
    if buf[:2] != b"P6":
        raise FormatError(f"not a binary PPM: magic {bytes(buf[:2])!r}, expected b'P6'", 0)
    tokens, pos = _header_tokens(buf, 4)
    values = []
    for tok, at in tokens[1:]:
        if not tok.isdigit():
            raise FormatError(f"bad PPM header field {tok!r}", at)
        values.append(int(tok))
    width, height, maxval = values
    if width < 1 or height < 1:
        raise FormatError(f"PPM dimensions must be positive, got {width}x{height}", tokens[1][1])
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}, only 255 is supported", tokens[3][1])
    if pos >= len(buf) or buf[pos] not in _WHITESPACE:
        raise FormatError("missing whitespace after PPM maxval", pos)
    pos += 1
    size = width * height * 3
    if len(buf) - pos < size:
        raise FormatError(f"truncated PPM payload: expected {size} bytes, got {len(buf) - pos}", len(buf))
    return np.frombuffer(buf, dtype=np.uint8, count=size, offset=pos).reshape(height, width, 3).copy()


def encode_ppm(image) -> bytes:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise FormatError(f"PPM images must be uint8 [H,W,3], got {image.dtype} {image.shape}")
    h, w, _ = image.shape
    return b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(image).tobytes()


def load_ppm(path) -> np.ndarray:
    """Read a P6 file into a uint8 ``[H, W, 3]`` array."""
    return decode_ppm(Path(path).read_bytes())


def save_ppm(image, path):
    Path(path).write_bytes(encode_ppm(image))
