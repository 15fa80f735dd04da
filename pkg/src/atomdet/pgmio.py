"""Binary PGM (P5) frame I/O plus ground-truth sidecar JSON.

Frames are written 16-bit big-endian (PGM convention for maxval > 255).
Float pixel values are rounded to the nearest integer and clipped to the
sample range; clipping emits a saturation warning rather than failing.
"""

from __future__ import annotations

import json
import warnings

import numpy as np

from atomdet.core import Image
from atomdet.errors import ConfigError


def write_pgm(path, image: Image, maxval: int = 65535) -> None:
    px = np.rint(image.pixels)
    if px.max(initial=0.0) > maxval:
        warnings.warn(f"{path}: {int((px > maxval).sum())} saturated pixels clipped to {maxval}")
    px = np.clip(px, 0, maxval)
    dtype = ">u2" if maxval > 255 else "u1"
    header = f"P5\n{image.width} {image.height}\n{maxval}\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(px.astype(dtype).tobytes())


def _read_tokens(data: bytes, count: int):
    """First `count` whitespace-separated header tokens, skipping # comments.
    Returns (tokens, offset just past the single whitespace after the last one)."""
    tokens = []
    i = 0
    while len(tokens) < count:
        if i >= len(data):
            raise ConfigError("truncated PGM header")
        ch = data[i:i + 1]
        if ch == b"#":
            while i < len(data) and data[i:i + 1] != b"\n":
                i += 1
        elif ch.isspace():
            i += 1
        else:
            j = i
            while j < len(data) and not data[j:j + 1].isspace() and data[j:j + 1] != b"#":
                j += 1
            tokens.append(data[i:j])
            i = j
    return tokens, i + 1  # exactly one whitespace byte terminates the maxval token


def read_pgm(path) -> Image:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P5"):
        raise ConfigError(f"{path}: not a binary PGM (P5) file")
    tokens, offset = _read_tokens(data[2:], 3)
    width, height, maxval = (int(t) for t in tokens)
    offset += 2  # the magic bytes skipped above
    dtype = ">u2" if maxval > 255 else "u1"
    n = width * height
    body = np.frombuffer(data, dtype=dtype, count=n, offset=offset)
    if body.size != n:
        raise ConfigError(f"{path}: expected {n} samples, file is short")
    bit_depth = 16 if maxval > 255 else 8
    return Image(body.reshape(height, width).astype(np.float64), bit_depth=bit_depth)


def write_truth(path, truth) -> None:
    payload = {
        "occupancy": np.asarray(truth.occupancy).astype(bool).tolist(),
        "gammas": np.asarray(truth.gammas).tolist(),
        "background": truth.background,
        "frame_index": truth.frame_index,
        "seed": truth.seed,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)
        fh.write("\n")


def read_truth(path) -> dict:
    with open(path) as fh:
        data = json.load(fh)
    data["occupancy"] = np.asarray(data["occupancy"], dtype=bool)
    data["gammas"] = np.asarray(data["gammas"], dtype=np.float64)
    return data
