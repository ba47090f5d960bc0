"""3D volume container, perpendicular slicing and the TPDMVOL1 file format.

Volumes are stored row-major with axis order (axis1, axis2, axis3).  Two
slice families are used throughout the package:

* ``SliceAxis.AXIS3`` -- planes ``x[:, :, j]`` of shape ``(d1, d2)``
  (the primary family),
* ``SliceAxis.AXIS1`` -- planes ``x[j, :, :]`` of shape ``(d2, d3)``
  (the auxiliary family).
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"TPDMVOL1"

_DTYPES = {"f32": np.dtype("<f4"), "c64": np.dtype("<c8")}


class CorruptFileError(ValueError):
    """Raised when a TPDMVOL1 file is malformed."""


class SliceAxis(enum.Enum):
    AXIS3 = 3
    AXIS1 = 1

    @property
    def dim(self) -> int:
        return 2 if self is SliceAxis.AXIS3 else 0


@dataclass
class Volume3D:
    """A ``d1 x d2 x d3`` grid of intensities."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"volume must be 3D, got shape {self.data.shape}")
        if min(self.data.shape) < 1:
            raise ValueError(f"volume extents must be positive, got {self.data.shape}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def copy(self) -> Volume3D:
        return Volume3D(self.data.copy())

    def extent(self, axis: SliceAxis) -> int:
        return self.data.shape[axis.dim]

    def plane_shape(self, axis: SliceAxis) -> tuple[int, int]:
        d1, d2, d3 = self.data.shape
        return (d1, d2) if axis is SliceAxis.AXIS3 else (d2, d3)


def _plane(data: np.ndarray, axis: SliceAxis, index: int):
    n = data.shape[axis.dim]
    if not 0 <= index < n:
        raise IndexError(f"slice index {index} out of range for {axis.name} (extent {n})")
    return (slice(None), slice(None), index) if axis is SliceAxis.AXIS3 else (index, slice(None), slice(None))


def slice_extract(vol: Volume3D, axis: SliceAxis, index: int) -> np.ndarray:
    return vol.data[_plane(vol.data, axis, index)].copy()


def slice_insert(vol: Volume3D, axis: SliceAxis, index: int, s: np.ndarray) -> Volume3D:
    """Return a copy of ``vol`` with one plane replaced by ``s``."""
    s = np.asarray(s)
    expected = vol.plane_shape(axis)
    if s.shape != expected:
        raise ValueError(f"slice shape {s.shape} does not match {axis.name} plane shape {expected}")
    out = vol.copy()
    out.data[_plane(out.data, axis, index)] = s
    return out


def all_slices(data: np.ndarray, axis: SliceAxis) -> np.ndarray:
    """Stack every plane of one family into a ``(n, h, w)`` array."""
    if axis is SliceAxis.AXIS3:
        return np.ascontiguousarray(np.moveaxis(data, 2, 0))
    return np.ascontiguousarray(data)


def from_slices(stack: np.ndarray, axis: SliceAxis) -> np.ndarray:
    """Inverse of :func:`all_slices`."""
    if axis is SliceAxis.AXIS3:
        return np.ascontiguousarray(np.moveaxis(stack, 0, 2))
    return np.ascontiguousarray(stack)


def normalize(vol: Volume3D) -> Volume3D:
    data = np.asarray(vol.data, dtype=np.float64)
    lo, hi = data.min(), data.max()
    if hi == lo:
        return Volume3D(np.zeros_like(data))
    return Volume3D((data - lo) / (hi - lo))


def _write(path, data: np.ndarray, dtype: str) -> None:
    header = json.dumps({"shape": list(data.shape), "dtype": dtype}).encode("utf-8")
    payload = np.ascontiguousarray(data, dtype=_DTYPES[dtype]).tobytes()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(payload)


def save_array(data: np.ndarray, path) -> None:
    """Write a real or complex 3D array as TPDMVOL1 (``f32`` or ``c64``)."""
    data = np.asarray(data)
    if data.ndim != 3:
        raise ValueError(f"TPDMVOL1 stores 3D arrays, got shape {data.shape}")
    _write(path, data, "c64" if np.iscomplexobj(data) else "f32")


def load_array(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:8] != MAGIC:
        raise CorruptFileError(f"{path}: missing TPDMVOL1 magic")
    (hlen,) = struct.unpack("<I", raw[8:12])
    if 12 + hlen > len(raw):
        raise CorruptFileError(f"{path}: header length {hlen} exceeds file size")
    try:
        header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
        shape = tuple(int(d) for d in header["shape"])
        dtype = _DTYPES[header["dtype"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptFileError(f"{path}: bad header ({exc})") from exc
    if len(shape) != 3 or min(shape) < 1:
        raise CorruptFileError(f"{path}: invalid shape {list(shape)}")
    payload = raw[12 + hlen :]
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(payload) != expected:
        raise CorruptFileError(f"{path}: payload has {len(payload)} bytes, expected {expected}")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))


def save(vol: Volume3D, path) -> None:
    save_array(np.asarray(vol.data, dtype=np.float32), path)


def load(path) -> Volume3D:
    data = load_array(path)
    if np.iscomplexobj(data):
        raise CorruptFileError(f"{path}: expected a real volume, found complex payload")
    return Volume3D(data)


def save_pgm(s: np.ndarray, path) -> None:
    """Export one slice as binary PGM, clipping to [0, 1]."""
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2:
        raise ValueError(f"PGM export needs a 2D slice, got shape {s.shape}")
    img = np.round(np.clip(s, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())
