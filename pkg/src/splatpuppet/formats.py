"""Raster codecs: portable float maps (PFM) and binary PGM.

Byte layout, authoritative for this project:

PFM
  line 1: magic — ``PF`` (3 channels), ``Pf`` (1 channel) or ``PF2``
          (2 channels, a local extension used for flow fields)
  line 2: ``<width> <height>`` in ASCII
  line 3: scale factor; its sign encodes endianness (negative = little
          endian).  Files are written with scale -1.0.
  data:   height rows of width * channels float32 samples, bottom row first
          (the portable-float-map raster order).  On read, big-endian data
          (positive scale) is byte-swapped and a non-unit |scale| multiplies
          the samples.

PGM (binary)
  ``P5\n<width> <height>\n255\n`` followed by height * width bytes, top row
  first.  Writing maps [0, 1] floats to 0..255 by rounding; reading divides
  by 255, so {0, 1} masks round-trip exactly via {0, 255}.
"""

from __future__ import annotations

import numpy as np

from .errors import FormatError

_PFM_MAGIC = {b"PF": 3, b"Pf": 1, b"PF2": 2}
_PFM_BY_CHANNELS = {3: b"PF", 1: b"Pf", 2: b"PF2"}


def pfm_write(path, image: np.ndarray) -> None:
    """Write a (H, W), (H, W, 1), (H, W, 2) or (H, W, 3) float image."""
    img = np.asarray(image, dtype=np.float32)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[2] not in _PFM_BY_CHANNELS:
        raise ValueError(f"unsupported PFM shape {np.asarray(image).shape}")
    h, w, c = img.shape
    with open(path, "wb") as fh:
        fh.write(_PFM_BY_CHANNELS[c] + b"\n")
        fh.write(f"{w} {h}\n".encode())
        fh.write(b"-1.0\n")
        fh.write(img[::-1].astype("<f4").tobytes())


def _read_token(fh) -> bytes:
    tok = b""
    while True:
        ch = fh.read(1)
        if not ch:
            raise FormatError("unexpected end of file in header")
        if ch.isspace():
            if tok:
                return tok
            continue
        tok += ch


def pfm_read(path) -> np.ndarray:
    """Read a PFM file; returns float32 (H, W) or (H, W, C)."""
    with open(path, "rb") as fh:
        magic = _read_token(fh)
        if magic not in _PFM_MAGIC:
            raise FormatError(f"not a PFM file (magic {magic!r})")
        channels = _PFM_MAGIC[magic]
        try:
            w = int(_read_token(fh))
            h = int(_read_token(fh))
            scale = float(_read_token(fh))
        except ValueError as e:
            raise FormatError(f"malformed PFM header: {e}") from None
        if w <= 0 or h <= 0 or scale == 0.0:
            raise FormatError("malformed PFM header values")
        count = w * h * channels
        raw = fh.read(4 * count)
        if len(raw) != 4 * count:
            raise FormatError("truncated PFM payload")
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(raw, dtype=dtype).astype(np.float32)
        img = data.reshape(h, w, channels)[::-1]
        if abs(scale) != 1.0:
            img = img * np.float32(abs(scale))
        if channels == 1:
            return np.ascontiguousarray(img[:, :, 0])
        return np.ascontiguousarray(img)


def pgm_write(path, image: np.ndarray) -> None:
    """Write a (H, W) image with values in [0, 1] as 8-bit binary PGM."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("PGM expects a single-channel (H, W) image")
    q = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w = q.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(q.tobytes())


def pgm_read(path) -> np.ndarray:
    """Read a binary PGM; returns float64 (H, W) in [0, 1]."""
    with open(path, "rb") as fh:
        magic = _read_token(fh)
        if magic != b"P5":
            raise FormatError(f"not a binary PGM (magic {magic!r})")
        try:
            w = int(_read_token(fh))
            h = int(_read_token(fh))
            maxval = int(_read_token(fh))
        except ValueError as e:
            raise FormatError(f"malformed PGM header: {e}") from None
        if maxval != 255:
            raise FormatError(f"unsupported PGM maxval {maxval}")
        raw = fh.read(w * h)
        if len(raw) != w * h:
            raise FormatError("truncated PGM payload")
        return np.frombuffer(raw, dtype=np.uint8).reshape(h, w) / 255.0
