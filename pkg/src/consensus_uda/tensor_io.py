"""Raster readers/writers and argmax.

In memory everything is a numpy array:

* label map: ``uint8`` of shape (H, W), 255 = ignore
* probability map: ``float32`` (or float64) of shape (H, W, C)
* RGB image: ``uint8`` of shape (H, W, 3)

On disk label maps are binary PGM (P5), images binary PPM (P6), both with
maxval 255. Probability maps use PMF1: the magic ``b"PMF1"``, then H, W, C
as little-endian uint32, then H*W*C little-endian float32 values with the
channel index fastest.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

PMF_MAGIC = b"PMF1"
SIMPLEX_TOL = 1e-3
MAX_CHANNELS = 254
_PMF_HEADER = struct.Struct("<4sIII")


def _read_netpbm(path, magic: bytes, channels: int) -> np.ndarray:
    data = Path(path).read_bytes()
    fields = []
    pos = 0
    # magic, width, height, maxval; '#' comments allowed between fields
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise FormatError(f"{path}: truncated header")
        if data[pos : pos + 1] == b"#":
            end = data.find(b"\n", pos)
            if end < 0:
                raise FormatError(f"{path}: truncated header")
            pos = end + 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != magic:
        raise FormatError(f"{path}: expected {magic.decode()} magic, found {fields[0][:8]!r}")
    try:
        width, height, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise FormatError(f"{path}: malformed header {fields[1:]!r}") from None
    if width <= 0 or height <= 0:
        raise FormatError(f"{path}: non-positive dimensions {width}x{height}")
    if maxval != 255:
        raise FormatError(f"{path}: maxval {maxval} unsupported (only 255)")
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise FormatError(f"{path}: missing whitespace after header")
    pos += 1
    n = width * height * channels
    payload = data[pos : pos + n]
    if len(payload) != n:
        raise FormatError(f"{path}: truncated payload ({len(payload)} of {n} bytes)")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    return arr if channels == 3 else arr[:, :, 0].copy()


def _write_netpbm(path, arr: np.ndarray, magic: bytes):
    height, width = arr.shape[:2]
    header = b"%s\n%d %d\n255\n" % (magic, width, height)
    Path(path).write_bytes(header + np.ascontiguousarray(arr, dtype=np.uint8).tobytes())


def read_labelmap(path) -> np.ndarray:
    return _read_netpbm(path, b"P5", 1)


def write_labelmap(labels: np.ndarray, path):
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise FormatError(f"label map must be 2-D, got shape {labels.shape}")
    if labels.dtype != np.uint8:
        if labels.size and (labels.min() < 0 or labels.max() > 255):
            raise FormatError("label values must fit in 8 bits")
    _write_netpbm(path, labels, b"P5")


def read_image(path) -> np.ndarray:
    return _read_netpbm(path, b"P6", 3)


def write_image(image: np.ndarray, path):
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise FormatError(f"RGB image must have shape (H, W, 3), got {image.shape}")
    _write_netpbm(path, image, b"P6")


def check_simplex(probs: np.ndarray, tol: float = SIMPLEX_TOL, where: str = "probability map"):
    """Raise FormatError naming the worst pixel if values leave [0, 1] or sums drift beyond ``tol``."""
    probs = np.asarray(probs)
    if not np.all(np.isfinite(probs)):
        coord = tuple(int(c) for c in np.argwhere(~np.isfinite(probs))[0][:2])
        raise FormatError(f"{where}: non-finite value at pixel {_fmt(coord)}")
    out_of_range = (probs < 0) | (probs > 1)
    if out_of_range.any():
        coord = tuple(int(c) for c in np.argwhere(out_of_range)[0][:2])
        raise FormatError(f"{where}: value outside [0,1] at pixel {_fmt(coord)}")
    dev = np.abs(probs.astype(np.float64).sum(axis=-1) - 1.0)
    if dev.size and dev.max() > tol:
        coord = np.unravel_index(int(np.argmax(dev)), dev.shape)
        total = float(probs[coord].astype(np.float64).sum())
        raise FormatError(
            f"{where}: simplex violation at pixel {_fmt(coord)}: "
            f"channel sum {total:.6f} (worst deviation {dev.max():.3e}, tolerance {tol:g})"
        )


def _fmt(coord) -> str:
    return "(" + ",".join(str(int(c)) for c in coord) + ")"


def read_probmap(path, validate: bool = True) -> np.ndarray:
    """Read PMF1 into a float32 (H, W, C) array.

    ``validate=False`` skips the simplex check, which non-probability
    payloads such as single-channel uncertainty dumps need.
    """
    data = Path(path).read_bytes()
    if len(data) < _PMF_HEADER.size:
        raise FormatError(f"{path}: truncated PMF1 header")
    magic, h, w, c = _PMF_HEADER.unpack_from(data)
    if magic != PMF_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    n = h * w * c
    expected = _PMF_HEADER.size + 4 * n
    if n == 0 or expected != len(data):
        raise FormatError(
            f"{path}: dimensions {h}x{w}x{c} imply {expected} bytes, file has {len(data)}"
        )
    probs = np.frombuffer(data, dtype="<f4", offset=_PMF_HEADER.size).reshape(h, w, c).astype(np.float32)
    if validate:
        check_simplex(probs, where=str(path))
    return probs


def write_probmap(probs: np.ndarray, path):
    probs = np.asarray(probs)
    if probs.ndim != 3:
        raise FormatError(f"probability map must have shape (H, W, C), got {probs.shape}")
    h, w, c = probs.shape
    body = np.ascontiguousarray(probs, dtype="<f4").tobytes()
    Path(path).write_bytes(_PMF_HEADER.pack(PMF_MAGIC, h, w, c) + body)


def argmax_labels(probs: np.ndarray) -> np.ndarray:
    """Per-pixel argmax; ties go to the lowest channel index."""
    probs = np.asarray(probs)
    if probs.shape[-1] > MAX_CHANNELS:
        raise FormatError(f"{probs.shape[-1]} channels exceed the {MAX_CHANNELS}-class limit")
    return np.argmax(probs, axis=-1).astype(np.uint8)


def read_prediction(path) -> np.ndarray:
    """Label map from either a PGM file or a PMF1 file (via argmax)."""
    path = Path(path)
    if path.suffix.lower() in (".pmf", ".pmf1"):
        return argmax_labels(read_probmap(path))
    return read_labelmap(path)
