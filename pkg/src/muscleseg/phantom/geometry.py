"""Image/mask phantoms: two curved, tapered tubes inside a low-contrast body.

Each tube is a stack of axial disks.  The disk centre follows a cubic through
four control points spread evenly along the tube, and the radius tapers
linearly from the inferior to the superior end.  The radius scale is solved
so the rasterised (voxel-centre) volume matches the planted volume.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ..voxgrid import LEFT, RIGHT, LandmarkPair, Mask3D, Spacing, Volume3D
from .cohort import SubjectRecord

DESK_SPACING = (3.5, 3.5, 6.0)
FULL_SPACING = (1.2, 1.2, 2.0)
VOLUME_RTOL = 0.005


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class TubeParams:
    """Tube between slices ``z0..z1`` (inclusive) with centre-line control points.

    ``control`` holds four (x, y) voxel positions at fractions 0, 1/3, 2/3, 1
    of the tube length; the first is the inferior end.  ``taper`` is the
    superior/inferior radius ratio.
    """

    control: tuple
    z0: int
    z1: int
    taper: float = 0.7

    def __post_init__(self):
        ctrl = tuple(tuple(float(v) for v in p) for p in self.control)
        if len(ctrl) != 4 or any(len(p) != 2 for p in ctrl):
            raise GeometryError("control needs four (x, y) points")
        object.__setattr__(self, "control", ctrl)
        if not 0 <= self.z0 < self.z1:
            raise GeometryError(f"need 0 <= z0 < z1, got {self.z0}, {self.z1}")
        if self.taper <= 0:
            raise GeometryError("taper ratio must be positive")

    def centerline(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        t = (np.asarray(z, dtype=np.float64) - self.z0) / (self.z1 - self.z0)
        nodes = np.array([0.0, 1 / 3, 2 / 3, 1.0])
        ctrl = np.array(self.control)
        # Lagrange basis through the four nodes
        basis = np.ones((4,) + t.shape)
        for a in range(4):
            for b in range(4):
                if a != b:
                    basis[a] *= (t - nodes[b]) / (nodes[a] - nodes[b])
        return np.tensordot(ctrl[:, 0], basis, 1), np.tensordot(ctrl[:, 1], basis, 1)

    def radius_profile(self, z: np.ndarray) -> np.ndarray:
        """Relative radius (1 at the inferior end)."""
        t = (np.asarray(z, dtype=np.float64) - self.z0) / (self.z1 - self.z0)
        return 1.0 + (self.taper - 1.0) * t

    def mirrored(self, nx: int) -> "TubeParams":
        return replace(self, control=tuple((nx - 1 - x, y) for x, y in self.control))


@dataclass(frozen=True)
class PhantomGeometry:
    dims: tuple
    spacing: Spacing
    right: TubeParams
    left: TubeParams
    body_level: float = 0.3
    contrast: float = 0.7
    noise_sd: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if isinstance(self.spacing, tuple):
            object.__setattr__(self, "spacing", Spacing(*self.spacing))
        if self.noise_sd < 0:
            raise GeometryError("noise_sd must be >= 0")
        for name, tube in (("right", self.right), ("left", self.left)):
            if tube.z1 >= self.dims[2]:
                raise GeometryError(f"{name} tube leaves the grid in z")


def grid_dims_for_crop(crop_dims) -> tuple[int, int, int]:
    cx, cy, cz = crop_dims
    return (2 * cx + 8, cy + 8, cz + 8)


def sample_geometry(rng: np.random.Generator, crop_dims=(32, 32, 64), spacing=DESK_SPACING,
                    symmetric: bool = False, noise_sd: float = 0.1) -> PhantomGeometry:
    """Random tube shapes laid out so each tube's crop (landmark at the anchor) contains it."""
    cx, cy, cz = crop_dims
    dims = grid_dims_for_crop(crop_dims)
    nx = dims[0]
    x0, y0, z0 = 4 + cx // 2, 4 + cy // 2, 4 + cz // 8

    def one_tube():
        length = int(rng.integers(round(0.62 * cz), round(0.78 * cz) + 1))
        # superior end drifts medially (+x for the right tube)
        drift = rng.uniform(0.06, 0.15) * cx
        wobble_x = rng.uniform(-0.05, 0.05, size=2) * cx
        wobble_y = rng.uniform(-0.08, 0.08, size=3) * cy
        ctrl = [(x0, y0)]
        for k, frac in enumerate((1 / 3, 2 / 3)):
            ctrl.append((x0 + drift * frac + wobble_x[k], y0 + wobble_y[k]))
        ctrl.append((x0 + drift, y0 + wobble_y[2]))
        return TubeParams(tuple(ctrl), z0, z0 + length, float(rng.uniform(0.55, 0.9)))

    right = one_tube()
    left = right.mirrored(nx) if symmetric else one_tube().mirrored(nx)
    return PhantomGeometry(dims, Spacing(*spacing), right, left, noise_sd=noise_sd)


def _rasterize(tube: TubeParams, dims, spacing: Spacing, scale_mm: float) -> np.ndarray:
    nx, ny, _ = dims
    sel = np.zeros(dims, dtype=bool)
    zs = np.arange(tube.z0, tube.z1 + 1)
    cxs, cys = tube.centerline(zs)
    radii = scale_mm * tube.radius_profile(zs)
    xs = np.arange(nx)[:, None]
    ys = np.arange(ny)[None, :]
    for z, cxz, cyz, r in zip(zs, cxs, cys, radii):
        sel[:, :, z] = ((xs - cxz) * spacing.dx) ** 2 + ((ys - cyz) * spacing.dy) ** 2 <= r * r
    return sel


def _check_inside(tube: TubeParams, dims, spacing: Spacing, scale_mm: float, name: str) -> None:
    zs = np.arange(tube.z0, tube.z1 + 1)
    cxs, cys = tube.centerline(zs)
    radii = scale_mm * tube.radius_profile(zs)
    rx, ry = radii / spacing.dx, radii / spacing.dy
    if (np.any(cxs - rx < 0) or np.any(cxs + rx > dims[0] - 1)
            or np.any(cys - ry < 0) or np.any(cys + ry > dims[1] - 1)):
        raise GeometryError(f"{name} tube cannot hold the requested volume inside the grid")


def fit_tube(tube: TubeParams, dims, spacing: Spacing, volume_ml: float, name: str = "tube") -> np.ndarray:
    """Rasterised tube whose voxel volume is within 0.5% of ``volume_ml``."""
    if volume_ml <= 0:
        raise GeometryError(f"{name}: volume must be positive")
    target_vox = volume_ml * 1000.0 / spacing.voxel_mm3
    zs = np.arange(tube.z0, tube.z1 + 1)
    prof = tube.radius_profile(zs)
    # slice-stacked disk volume: sum(pi r^2) * dz = target
    s0 = np.sqrt(volume_ml * 1000.0 / (np.pi * spacing.dz * np.sum(prof ** 2)))
    count = lambda s: int(_rasterize(tube, dims, spacing, s).sum())  # noqa: E731
    lo, hi = 0.8 * s0, 1.25 * s0
    while count(lo) > target_vox:
        lo *= 0.8
    while count(hi) < target_vox:
        hi *= 1.25
        _check_inside(tube, dims, spacing, hi / 1.25, name)
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        c = count(mid)
        if abs(c - target_vox) <= VOLUME_RTOL * target_vox:
            lo = hi = mid
            break
        if c < target_vox:
            lo = mid
        else:
            hi = mid
    scale = 0.5 * (lo + hi)
    _check_inside(tube, dims, spacing, scale, name)
    return _rasterize(tube, dims, spacing, scale)


def _landmark(tube: TubeParams) -> tuple[int, int, int]:
    cx, cy = tube.centerline(np.array([tube.z0]))
    return (int(round(float(cx[0]))), int(round(float(cy[0]))), tube.z0)


def synthesize_subject(subject: SubjectRecord, geometry: PhantomGeometry, seed: int):
    """Image, label mask (1 right, 2 left) and hip landmarks for one subject."""
    dims, sp = geometry.dims, geometry.spacing
    right = fit_tube(geometry.right, dims, sp, subject.true_right_ml, "right")
    left = fit_tube(geometry.left, dims, sp, subject.true_left_ml, "left")
    if np.any(right & left):
        raise GeometryError("right and left tubes overlap")
    labels = np.zeros(dims, dtype=np.uint8)
    labels[right] = RIGHT
    labels[left] = LEFT

    nx, ny, _ = dims
    xs = (np.arange(nx) - (nx - 1) / 2) / (nx / 2)
    ys = (np.arange(ny) - (ny - 1) / 2) / (ny / 2)
    body = (xs[:, None] ** 2 + ys[None, :] ** 2) <= 1.0
    image = np.zeros(dims, dtype=np.float64)
    image[body] = geometry.body_level
    image[labels > 0] = geometry.body_level + geometry.contrast
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, 0x6E6F6973])
    image += geometry.noise_sd * rng.standard_normal(dims)
    landmarks = LandmarkPair(_landmark(geometry.right), _landmark(geometry.left))
    return Volume3D(image.astype(np.float32), sp), Mask3D(labels, sp), landmarks


def subject_seed(cohort_seed: int, index: int) -> int:
    return int(cohort_seed) ^ int(index)


def synthesize_cohort_member(subject: SubjectRecord, index: int, cohort_seed: int,
                             crop_dims=(32, 32, 64), spacing=DESK_SPACING, symmetric: bool = False):
    """Geometry and noise for subject ``index``, seeded independently of every other subject."""
    seed = subject_seed(cohort_seed, index)
    rng = np.random.default_rng([seed, 0x67656F])
    geometry = sample_geometry(rng, crop_dims, spacing, symmetric=symmetric)
    return synthesize_subject(subject, geometry, seed)
