"""Volumetric grids, the MVOL file format, mask geometry and overlap metrics.

Arrays are indexed ``[x, y, z]`` with the orientation convention
+x = subject left, +y = anterior, +z = superior, so the right muscle sits at
smaller x.  On disk the payload is x-fastest (Fortran order).
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np
from scipy import ndimage

MVOL_MAGIC = "MVOL"
MVOL_VERSION = 1
RIGHT, LEFT = 1, 2
BACKGROUND = 0

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}
_KIND_DTYPE = {"image": "f32", "mask": "u8"}


class MvolError(ValueError):
    """Base class for MVOL read/write problems."""


class MvolFormatError(MvolError):
    """The file is not an MVOL file (bad magic, unreadable header)."""


class CorruptFileError(MvolError):
    """Header and payload disagree."""


@dataclass(frozen=True)
class Spacing:
    dx: float
    dy: float
    dz: float

    def __post_init__(self):
        for name in ("dx", "dy", "dz"):
            v = float(getattr(self, name))
            if not math.isfinite(v) or v <= 0:
                raise ValueError(f"spacing {name} must be positive and finite, got {v}")
            object.__setattr__(self, name, v)

    @property
    def voxel_mm3(self) -> float:
        return self.dx * self.dy * self.dz

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.dx, self.dy, self.dz)


def _as_spacing(spacing) -> Spacing:
    if isinstance(spacing, Spacing):
        return spacing
    return Spacing(*spacing)


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Volume3D:
    """Scalar image on a regular grid; values are stored as float32."""

    voxels: np.ndarray
    spacing: Spacing = field(default_factory=lambda: Spacing(1.0, 1.0, 1.0))

    kind = "image"

    def __post_init__(self):
        vox = np.asarray(self.voxels, dtype=np.float32)
        if vox.ndim != 3 or min(vox.shape) < 1:
            raise ValueError(f"voxels must be a non-empty 3D array, got shape {vox.shape}")
        if not np.all(np.isfinite(vox)):
            raise ValueError("voxel values must be finite")
        object.__setattr__(self, "voxels", _frozen(vox))
        object.__setattr__(self, "spacing", _as_spacing(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.voxels.shape)

    def with_voxels(self, voxels) -> "Volume3D":
        return Volume3D(voxels, self.spacing)


@dataclass(frozen=True, eq=False)
class Mask3D:
    """Label grid: 0 background, 1 right muscle, 2 left muscle."""

    labels: np.ndarray
    spacing: Spacing = field(default_factory=lambda: Spacing(1.0, 1.0, 1.0))

    kind = "mask"

    def __post_init__(self):
        raw = np.asarray(self.labels)
        if raw.ndim != 3 or min(raw.shape) < 1:
            raise ValueError(f"labels must be a non-empty 3D array, got shape {raw.shape}")
        if raw.size and (raw.min() < 0 or raw.max() > 2):
            raise ValueError("mask labels must be drawn from {0, 1, 2}")
        object.__setattr__(self, "labels", _frozen(raw.astype(np.uint8)))
        object.__setattr__(self, "spacing", _as_spacing(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.labels.shape)

    def with_labels(self, labels) -> "Mask3D":
        return Mask3D(labels, self.spacing)


Grid = Union[Volume3D, Mask3D]


@dataclass(frozen=True)
class LandmarkPair:
    """Integer voxel coordinates of the right and left hip landmarks."""

    right: tuple[int, int, int]
    left: tuple[int, int, int]

    def __post_init__(self):
        object.__setattr__(self, "right", tuple(int(v) for v in self.right))
        object.__setattr__(self, "left", tuple(int(v) for v in self.left))
        if self.right[0] >= self.left[0]:
            raise ValueError("right landmark must have smaller x than the left landmark")

    def check_inside(self, dims) -> None:
        for name, p in (("right", self.right), ("left", self.left)):
            if not all(0 <= c < d for c, d in zip(p, dims)):
                raise ValueError(f"{name} landmark {p} outside grid {tuple(dims)}")

    def flipped(self, nx: int) -> "LandmarkPair":
        """Landmarks of the x-mirrored grid (sides swap roles)."""
        r = (nx - 1 - self.left[0], self.left[1], self.left[2])
        lft = (nx - 1 - self.right[0], self.right[1], self.right[2])
        return LandmarkPair(r, lft)


# --------------------------------------------------------------------------- I/O

def _header_bytes(grid: Grid) -> bytes:
    header = {
        "magic": MVOL_MAGIC,
        "version": MVOL_VERSION,
        "kind": grid.kind,
        "dims": list(grid.dims),
        "spacing_mm": list(grid.spacing.as_tuple()),
        "dtype": _KIND_DTYPE[grid.kind],
        "order": "x-fastest",
        "endian": "little",
    }
    return (json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n").encode("utf-8")


def encode_mvol(grid: Grid) -> bytes:
    arr = grid.voxels if grid.kind == "image" else grid.labels
    payload = np.asarray(arr, dtype=_DTYPES[_KIND_DTYPE[grid.kind]]).ravel(order="F").tobytes()
    return _header_bytes(grid) + payload


def decode_mvol(blob: bytes) -> Grid:
    nl = blob.find(b"\n")
    if nl < 0:
        raise MvolFormatError("missing MVOL header line")
    try:
        header = json.loads(blob[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MvolFormatError(f"unreadable MVOL header: {exc}") from None
    if not isinstance(header, dict) or header.get("magic") != MVOL_MAGIC:
        raise MvolFormatError("unknown magic, not an MVOL file")
    try:
        kind = header["kind"]
        dims = tuple(int(d) for d in header["dims"])
        spacing = Spacing(*header["spacing_mm"])
        dtype = _DTYPES[header["dtype"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptFileError(f"invalid MVOL header: {exc}") from None
    if kind not in _KIND_DTYPE or len(dims) != 3 or min(dims) < 1:
        raise CorruptFileError(f"invalid MVOL header fields kind={kind!r} dims={dims}")
    payload = blob[nl + 1:]
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(payload) != expected:
        raise CorruptFileError(
            f"payload holds {len(payload)} bytes, header {dims} x {dtype.itemsize} needs {expected}")
    arr = np.frombuffer(payload, dtype=dtype).reshape(dims, order="F")
    if kind == "image":
        return Volume3D(arr, spacing)
    return Mask3D(arr, spacing)


def write_mvol(grid: Grid, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(encode_mvol(grid))
    os.replace(tmp, path)


def read_mvol(path) -> Grid:
    with open(path, "rb") as fh:
        return decode_mvol(fh.read())


# --------------------------------------------------------------------- geometry

def _labels(mask) -> np.ndarray:
    return mask.labels if isinstance(mask, Mask3D) else np.asarray(mask)


def _check_label(label: int) -> None:
    if label not in (RIGHT, LEFT):
        raise ValueError(f"label must be 1 (right) or 2 (left), got {label!r}")


def mask_volume_ml(mask: Mask3D, label: int) -> float:
    _check_label(label)
    count = int(np.count_nonzero(mask.labels == label))
    return count * mask.spacing.voxel_mm3 / 1000.0


def dsc(mask_a, mask_b, label: int | None = None) -> float:
    """Dice overlap ``2TP / (FP + 2TP + FN)`` of one label (or of any non-zero voxel).

    Two empty masks agree perfectly and score 1.0.
    """
    a, b = _labels(mask_a), _labels(mask_b)
    if a.shape != b.shape:
        raise ValueError(f"mask dims differ: {a.shape} vs {b.shape}")
    if label is None:
        a, b = a != 0, b != 0
    else:
        a, b = a == label, b == label
    tp = int(np.count_nonzero(a & b))
    fp = int(np.count_nonzero(~a & b))
    fn = int(np.count_nonzero(a & ~b))
    denom = fp + 2 * tp + fn
    if denom == 0:
        return 1.0
    return 2.0 * tp / denom


def flip_x(grid: Grid) -> Grid:
    if isinstance(grid, Volume3D):
        return grid.with_voxels(grid.voxels[::-1])
    if isinstance(grid, Mask3D):
        return grid.with_labels(grid.labels[::-1])
    return np.ascontiguousarray(np.asarray(grid)[::-1])


def linear_index(dims) -> np.ndarray:
    """x-fastest linear index of every voxel (the MVOL payload order)."""
    nx, ny, nz = dims
    return np.arange(nx * ny * nz).reshape((nx, ny, nz), order="F")


def largest_component(mask: Mask3D, label: int) -> Mask3D:
    """Keep only the largest 26-connected component of ``label``.

    Other labels are left untouched.  Ties go to the component containing the
    smallest x-fastest linear index.
    """
    lab = mask.labels
    sel = lab == label
    if not sel.any():
        return mask
    comp, ncomp = ndimage.label(sel, structure=np.ones((3, 3, 3), dtype=bool))
    if ncomp == 1:
        return mask
    ids = comp.ravel(order="F")
    sizes = np.bincount(ids, minlength=ncomp + 1)
    first = np.full(ncomp + 1, ids.size, dtype=np.int64)
    np.minimum.at(first, ids, np.arange(ids.size))
    cands = np.arange(1, ncomp + 1)
    # max size, then min first index
    best = cands[np.lexsort((first[1:], -sizes[1:]))[0]]
    out = lab.copy()
    out[sel & (comp != best)] = BACKGROUND
    return mask.with_labels(out)
