"""Landmark cropping, z-scoring, mirror pooling and bounded affine augmentation.

Crops are taken per side.  The right crop puts the hip landmark at
``(cx//2, cy//2, z_anchor)``; the left crop puts it at ``cx - 1 - cx//2`` in x
so that flipping the left crop along x lands it at ``cx//2`` as well.  This
makes the two canonical crops of a mirror-symmetric volume identical.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Iterator, NamedTuple

import numpy as np

from ._accel import njit, use_numba
from .voxgrid import LEFT, RIGHT, LandmarkPair, Mask3D, Volume3D

SIDES = ("right", "left")
SIDE_LABEL = {"right": RIGHT, "left": LEFT}

# inclusive bounds: (tx, ty, tz) voxels, (sx, sy, sz) factors
TRANSLATION_MAX = (6.0, 6.0, 24.0)
SCALE_RANGE = ((0.75, 1.25), (0.75, 1.25), (0.5, 1.5))


def _check_side(side: str) -> None:
    if side not in SIDES:
        raise ValueError(f"side must be 'right' or 'left', got {side!r}")


@dataclass(frozen=True)
class CropSpec:
    dims: tuple = (96, 96, 192)
    z_anchor: int | None = None

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or any(d <= 0 or d % 16 for d in dims):
            raise ValueError(f"crop dims must be three positive multiples of 16, got {self.dims}")
        object.__setattr__(self, "dims", dims)
        za = dims[2] // 8 if self.z_anchor is None else int(self.z_anchor)
        if not 0 <= za < dims[2]:
            raise ValueError(f"z_anchor {za} outside [0, {dims[2]})")
        object.__setattr__(self, "z_anchor", za)

    def anchor(self, side: str) -> tuple[int, int, int]:
        """Crop coordinate that the side's landmark maps to (before mirroring)."""
        _check_side(side)
        cx, cy, _ = self.dims
        ax = cx // 2 if side == "right" else cx - 1 - cx // 2
        return (ax, cy // 2, self.z_anchor)

    def origin(self, landmark, side: str) -> tuple[int, int, int]:
        """Source-grid index of crop voxel (0, 0, 0)."""
        return tuple(int(l) - a for l, a in zip(landmark, self.anchor(side)))


def _overlap(origin, crop_dims, src_dims):
    """Matching (source, crop) slices of the in-grid part of a crop window."""
    src, dst = [], []
    for o, c, n in zip(origin, crop_dims, src_dims):
        lo, hi = max(o, 0), min(o + c, n)
        if hi <= lo:
            return None
        src.append(slice(lo, hi))
        dst.append(slice(lo - o, hi - o))
    return tuple(src), tuple(dst)


def extract_window(arr: np.ndarray, origin, crop_dims) -> np.ndarray:
    out = np.zeros(tuple(crop_dims), dtype=arr.dtype)
    ov = _overlap(origin, crop_dims, arr.shape)
    if ov is not None:
        out[ov[1]] = arr[ov[0]]
    return out


def crop_about_landmark(volume: Volume3D, mask: Mask3D | None, landmark, crop_spec: CropSpec,
                        side: str = "right"):
    """``(image_crop, mask_crop)`` around ``landmark``; out-of-grid voxels are zero.

    The mask crop keeps only ``side``'s label, as {0, 1}.  ``mask`` may be
    ``None`` at inference time, in which case the mask crop is ``None``.
    """
    origin = crop_spec.origin(landmark, side)
    image = extract_window(np.asarray(volume.voxels), origin, crop_spec.dims)
    if mask is None:
        return image, None
    labels = extract_window(np.asarray(mask.labels), origin, crop_spec.dims)
    return image, (labels == SIDE_LABEL[side]).astype(np.uint8)


def normalize_zscore(image: np.ndarray) -> np.ndarray:
    """Zero mean, unit population SD (float32); a constant input maps to zeros."""
    x = np.asarray(image, dtype=np.float64)
    mu = x.mean()
    sd = x.std()
    if not np.isfinite(sd) or sd <= 1e-12 * max(1.0, abs(mu)):
        return np.zeros(x.shape, dtype=np.float32)
    return ((x - mu) / sd).astype(np.float32)


def mirror_to_canonical(image, mask, side: str):
    """Flip left-side crops along x; right-side crops pass through unchanged."""
    _check_side(side)
    if side == "right":
        return image, mask
    flip = lambda a: None if a is None else np.ascontiguousarray(a[::-1])  # noqa: E731
    return flip(image), flip(mask)


# ------------------------------------------------------------------ affine


@dataclass(frozen=True)
class AffineParams:
    """Axis-aligned scale about the crop centre followed by a translation (voxels)."""

    translation: tuple = (0.0, 0.0, 0.0)
    scale: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        t = tuple(float(v) for v in self.translation)
        s = tuple(float(v) for v in self.scale)
        if len(t) != 3 or len(s) != 3:
            raise ValueError("translation and scale need three components")
        for axis, (tv, tmax) in enumerate(zip(t, TRANSLATION_MAX)):
            if not -tmax <= tv <= tmax:
                raise ValueError(f"translation[{axis}]={tv} outside [-{tmax}, {tmax}]")
        for axis, (sv, (lo, hi)) in enumerate(zip(s, SCALE_RANGE)):
            if not lo <= sv <= hi:
                raise ValueError(f"scale[{axis}]={sv} outside [{lo}, {hi}]")
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "scale", s)

    @property
    def is_identity(self) -> bool:
        return self.translation == (0.0, 0.0, 0.0) and self.scale == (1.0, 1.0, 1.0)

    def source_coords(self, dims) -> list[np.ndarray]:
        """Per-axis source coordinate of every output index (the map is separable)."""
        out = []
        for n, t, s in zip(dims, self.translation, self.scale):
            c = (n - 1) / 2.0
            out.append(c + (np.arange(n, dtype=np.float64) - c - t) / s)
        return out


def draw_affine(rng: np.random.Generator, range_scale: float = 1.0) -> AffineParams:
    """Uniform draw inside the bounds; ``range_scale`` in (0, 1] shrinks them about identity."""
    if not 0.0 < range_scale <= 1.0:
        raise ValueError("range_scale must be in (0, 1]")
    t = rng.uniform(-1.0, 1.0, size=3) * np.array(TRANSLATION_MAX) * range_scale
    u = rng.uniform(-1.0, 1.0, size=3)
    s = [1.0 + ui * range_scale * ((hi - 1.0) if ui >= 0 else (1.0 - lo))
         for ui, (lo, hi) in zip(u, SCALE_RANGE)]
    return AffineParams(tuple(t), tuple(s))


@njit
def _resample_nb(src, qx, qy, qz, out_img):
    nx, ny, nz = src.shape
    for a in range(qx.shape[0]):
        x = qx[a]
        x0 = int(np.floor(x))
        fx = x - x0
        for b in range(qy.shape[0]):
            y = qy[b]
            y0 = int(np.floor(y))
            fy = y - y0
            for c in range(qz.shape[0]):
                z = qz[c]
                z0 = int(np.floor(z))
                fz = z - z0
                acc = 0.0
                for di in range(2):
                    xi = x0 + di
                    if xi < 0 or xi >= nx:
                        continue
                    wx = fx if di else 1.0 - fx
                    for dj in range(2):
                        yj = y0 + dj
                        if yj < 0 or yj >= ny:
                            continue
                        wy = fy if dj else 1.0 - fy
                        for dk in range(2):
                            zk = z0 + dk
                            if zk < 0 or zk >= nz:
                                continue
                            wz = fz if dk else 1.0 - fz
                            acc += wx * wy * wz * src[xi, yj, zk]
                out_img[a, b, c] = acc


def _linear_matrix(q: np.ndarray, n: int) -> np.ndarray:
    """Dense (len(q), n) 1-D linear interpolation matrix with zero outside [0, n)."""
    m = np.zeros((q.size, n))
    i0 = np.floor(q).astype(np.int64)
    f = q - i0
    rows = np.arange(q.size)
    for idx, w in ((i0, 1.0 - f), (i0 + 1, f)):
        ok = (idx >= 0) & (idx < n)
        m[rows[ok], idx[ok]] += w[ok]
    return m


def resample_trilinear(image: np.ndarray, params: AffineParams) -> np.ndarray:
    src = np.ascontiguousarray(image, dtype=np.float64)
    qx, qy, qz = params.source_coords(src.shape)
    if use_numba():
        out = np.empty(src.shape, dtype=np.float64)
        _resample_nb(src, qx, qy, qz, out)
    else:
        mx, my, mz = (_linear_matrix(q, n) for q, n in zip((qx, qy, qz), src.shape))
        out = np.einsum("ai,ijk->ajk", mx, src)
        out = np.einsum("bj,ajk->abk", my, out)
        out = np.einsum("ck,abk->abc", mz, out)
    return out.astype(np.float32)


def resample_nearest(mask: np.ndarray, params: AffineParams) -> np.ndarray:
    src = np.asarray(mask)
    idx, ok = [], []
    for q, n in zip(params.source_coords(src.shape), src.shape):
        i = np.floor(q + 0.5).astype(np.int64)
        ok.append((i >= 0) & (i < n))
        idx.append(np.clip(i, 0, n - 1))
    out = src[np.ix_(*idx)].copy()
    out[~(ok[0][:, None, None] & ok[1][None, :, None] & ok[2][None, None, :])] = 0
    return out


def apply_affine(image, mask, params: AffineParams):
    if params.is_identity:
        return np.asarray(image, dtype=np.float32).copy(), None if mask is None else np.asarray(mask).copy()
    return resample_trilinear(image, params), None if mask is None else resample_nearest(mask, params)


def random_affine(image, mask, rng: np.random.Generator, range_scale: float = 1.0):
    """``(image, mask, params)`` after a random scale + translation."""
    params = draw_affine(rng, range_scale)
    img, msk = apply_affine(image, mask, params)
    return img, msk, params


# ---------------------------------------------------------- training set


class SubjectImages(NamedTuple):
    id: str
    volume: Volume3D
    mask: Mask3D
    landmarks: LandmarkPair


@dataclass(frozen=True)
class TrainingSample:
    image: np.ndarray
    mask: np.ndarray
    subject_id: str
    side: str
    mirrored: bool
    transform_index: int
    params: AffineParams | None = None

    def __post_init__(self):
        if self.image.shape != self.mask.shape:
            raise ValueError("image and mask crops differ in shape")
        if self.mask.size and self.mask.max() > 1:
            raise ValueError("training masks must be binary")


def sample_keys(subject_ids, aug_count: int):
    """Ordered ``(subject_id, side, mirrored, transform_index)`` for every sample."""
    if aug_count < 0:
        raise ValueError("aug_count must be >= 0")
    return [(sid, side, mirrored, t) for sid in subject_ids for side in SIDES
            for mirrored in (False, True) for t in range(1 + aug_count)]


def sample_rng(seed: int, subject_id: str, side: str, mirrored: bool, transform_index: int):
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(subject_id.encode()), SIDES.index(side),
           int(mirrored), int(transform_index)]
    return np.random.default_rng(np.random.SeedSequence(key))


def canonical_crop(subject: SubjectImages, crop_spec: CropSpec, side: str):
    landmark = subject.landmarks.right if side == "right" else subject.landmarks.left
    image, mask = crop_about_landmark(subject.volume, subject.mask, landmark, crop_spec, side)
    return mirror_to_canonical(normalize_zscore(image), mask, side)


def make_sample(subject: SubjectImages, crop_spec: CropSpec, side: str, mirrored: bool,
                transform_index: int, seed: int, range_scale: float = 1.0,
                base=None) -> TrainingSample:
    image, mask = base if base is not None else canonical_crop(subject, crop_spec, side)
    if mirrored:
        image, mask = image[::-1], mask[::-1]
    params = None
    if transform_index > 0:
        rng = sample_rng(seed, subject.id, side, mirrored, transform_index)
        image, mask, params = random_affine(image, mask, rng, range_scale)
        image = normalize_zscore(image)
    return TrainingSample(np.ascontiguousarray(image, dtype=np.float32), np.ascontiguousarray(mask),
                          subject.id, side, mirrored, transform_index, params)


def iter_training_samples(subjects, crop_spec: CropSpec, aug_count: int = 7, seed: int = 0,
                          range_scale: float = 1.0) -> Iterator[TrainingSample]:
    if aug_count < 0:
        raise ValueError("aug_count must be >= 0")
    for subj in subjects:
        for side in SIDES:
            base = canonical_crop(subj, crop_spec, side)
            for mirrored in (False, True):
                for t in range(1 + aug_count):
                    yield make_sample(subj, crop_spec, side, mirrored, t, seed, range_scale, base)


def build_training_set(subjects, crop_spec: CropSpec, aug_count: int = 7, seed: int = 0,
                       range_scale: float = 1.0) -> list[TrainingSample]:
    """Per subject: 2 sides x 2 mirror states x (1 + aug_count) samples."""
    return list(iter_training_samples(subjects, crop_spec, aug_count, seed, range_scale))
