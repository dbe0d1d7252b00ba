"""16-bit binary PGM (P5) reading and writing."""

import re

import numpy as np

from .errors import FormatError
from .pattern import minmax01_normalize

MAXVAL = 65535


def to_u16(p):
    """Min-max normalize and quantize to [0, 65535] with round-half-up."""
    return np.floor(minmax01_normalize(p) * MAXVAL + 0.5).astype(np.uint16)


def encode_pgm(p):
    img = to_u16(p)
    h, w = img.shape
    return f"P5\n{w} {h}\n{MAXVAL}\n".encode("ascii") + img.astype(">u2").tobytes()


def write_pgm(path, p):
    with open(path, "wb") as fh:
        fh.write(encode_pgm(p))


_HEADER = re.compile(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s")


def decode_pgm(data):
    m = _HEADER.match(data)
    if m is None:
        raise FormatError("not a binary PGM")
    w, h, maxval = (int(g) for g in m.groups())
    body = data[m.end():]
    dt = ">u2" if maxval > 255 else "u1"
    if len(body) != w * h * np.dtype(dt).itemsize:
        raise FormatError("PGM payload size does not match header")
    return np.frombuffer(body, dtype=dt).reshape(h, w).astype(np.float64) / maxval


def read_pgm(path):
    with open(path, "rb") as fh:
        return decode_pgm(fh.read())
