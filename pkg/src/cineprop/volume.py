"""Core 3D grid types plus interpolation, smoothing, and pyramid downsampling.

Conventions used throughout the package:

* Grids are indexed ``(i, j, k)`` along ``(x, y, z)``; flat (on-disk) order is
  row-major with x fastest, i.e. ``flat[i + nx*j + nx*ny*k]``.  In numpy terms
  the canonical array has shape ``(nx, ny, nz)`` and serializes with
  ``ravel(order="F")``.
* ``spacing`` is mm per voxel along each axis; physical coordinates of voxel
  ``(i, j, k)`` are ``(i*sx, j*sy, k*sz)``.
* Continuous sample positions are given in voxel-index units; positions
  outside the grid are clamped to the boundary voxel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameterError

BACKGROUND = 0
LV = 1
MYO = 2
RV = 3
LABEL_CODES = (BACKGROUND, LV, MYO, RV)
CLASS_NAMES = {LV: "LV", MYO: "MYO", RV: "RV"}
FOREGROUND_CLASSES = (LV, MYO, RV)

# A continuous sample position in voxel-index units.
GridPoint = tuple[float, float, float]


def _check_spacing(spacing) -> tuple[float, float, float]:
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or any(not math.isfinite(s) or s <= 0 for s in spacing):
        raise InvalidParameterError(f"spacing must be 3 positive finite values, got {spacing}")
    return spacing


@dataclass(frozen=True, eq=False)
class ScalarVolume:
    """A 3D scalar grid with physical spacing.

    ``data`` is float32 with shape ``(nx, ny, nz)``; it is made read-only on
    construction so volumes can be shared freely between threads.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim != 3 or any(n < 1 for n in arr.shape):
            raise InvalidParameterError(f"volume must be 3D with positive dims, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise InvalidParameterError("volume contains non-finite values")
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def voxels(self) -> np.ndarray:
        """Flat voxel array in row-major x-fastest order (the on-disk layout)."""
        return self.data.ravel(order="F")

    def is_constant(self) -> bool:
        return bool(self.data.max() == self.data.min())


@dataclass(frozen=True, eq=False)
class LabelMap:
    """A 3D grid of class codes {0=background, 1=LV, 2=MYO, 3=RV}."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3 or any(n < 1 for n in arr.shape):
            raise InvalidParameterError(f"label map must be 3D with positive dims, got shape {arr.shape}")
        if arr.dtype != np.uint8:
            if not np.all(np.isin(arr, LABEL_CODES)):
                raise InvalidParameterError("label map contains codes outside {0,1,2,3}")
            arr = arr.astype(np.uint8)
        elif arr.max(initial=0) > RV:
            raise InvalidParameterError("label map contains codes outside {0,1,2,3}")
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def voxels(self) -> np.ndarray:
        return self.data.ravel(order="F")

    def mask(self, label: int) -> np.ndarray:
        return self.data == label


@dataclass(frozen=True, eq=False)
class CineSeries:
    """Ordered timeframes of one subject with manual labels at ES and ED."""

    frames: tuple[ScalarVolume, ...]
    es_index: int
    ed_index: int
    es_label: LabelMap
    ed_label: LabelMap
    subject: str = ""
    vendor: str = ""
    center: str = ""

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        n = len(self.frames)
        if n < 2:
            raise InvalidParameterError("a cine series needs at least 2 frames")
        if not (0 <= self.es_index < n and 0 <= self.ed_index < n):
            raise InvalidParameterError(
                f"template indices ({self.es_index}, {self.ed_index}) out of range for {n} frames"
            )
        if self.es_index == self.ed_index:
            raise InvalidParameterError("es_index and ed_index must differ")
        dims, spacing = self.frames[0].dims, self.frames[0].spacing
        for t, f in enumerate(self.frames):
            if f.dims != dims or f.spacing != spacing:
                raise InvalidParameterError(f"frame {t} grid differs from frame 0")
        for name, lab in (("es_label", self.es_label), ("ed_label", self.ed_label)):
            if lab.dims != dims or lab.spacing != spacing:
                raise InvalidParameterError(f"{name} grid does not match the frames")

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    def template_label(self, index: int) -> LabelMap:
        if index == self.es_index:
            return self.es_label
        if index == self.ed_index:
            return self.ed_label
        raise InvalidParameterError(f"frame {index} is not a template frame")


def _check_points(xs, ys, zs):
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    zs = np.asarray(zs, dtype=np.float64)
    if not (np.all(np.isfinite(xs)) and np.all(np.isfinite(ys)) and np.all(np.isfinite(zs))):
        raise InvalidParameterError("sample positions must be finite")
    return xs, ys, zs


def trilinear_sample_many(vol: ScalarVolume, xs, ys, zs) -> np.ndarray:
    """Trilinear interpolation at arrays of positions (voxel units, clamped)."""
    xs, ys, zs = _check_points(xs, ys, zs)
    nx, ny, nz = vol.dims
    xs = np.clip(xs, 0.0, nx - 1.0)
    ys = np.clip(ys, 0.0, ny - 1.0)
    zs = np.clip(zs, 0.0, nz - 1.0)
    x0 = np.minimum(np.floor(xs), nx - 2 if nx > 1 else 0).astype(np.intp)
    y0 = np.minimum(np.floor(ys), ny - 2 if ny > 1 else 0).astype(np.intp)
    z0 = np.minimum(np.floor(zs), nz - 2 if nz > 1 else 0).astype(np.intp)
    x1 = np.minimum(x0 + 1, nx - 1)
    y1 = np.minimum(y0 + 1, ny - 1)
    z1 = np.minimum(z0 + 1, nz - 1)
    fx = xs - x0
    fy = ys - y0
    fz = zs - z0

    d = vol.data
    c000 = d[x0, y0, z0].astype(np.float64)
    c100 = d[x1, y0, z0]
    c010 = d[x0, y1, z0]
    c110 = d[x1, y1, z0]
    c001 = d[x0, y0, z1]
    c101 = d[x1, y0, z1]
    c011 = d[x0, y1, z1]
    c111 = d[x1, y1, z1]

    # nested lerps: exact on lattice points and on constant volumes
    c00 = c000 + fx * (c100 - c000)
    c10 = c010 + fx * (c110 - c010)
    c01 = c001 + fx * (c101 - c001)
    c11 = c011 + fx * (c111 - c011)
    c0 = c00 + fy * (c10 - c00)
    c1 = c01 + fy * (c11 - c01)
    return c0 + fz * (c1 - c0)


def trilinear_sample(vol: ScalarVolume, p: GridPoint) -> float:
    """Trilinear interpolation of the 8 surrounding voxels at one position."""
    return float(trilinear_sample_many(vol, [p[0]], [p[1]], [p[2]])[0])


def nearest_sample_many(lm: LabelMap, xs, ys, zs) -> np.ndarray:
    """Nearest-voxel label lookup; half-way ties go to the lower index per axis."""
    xs, ys, zs = _check_points(xs, ys, zs)
    nx, ny, nz = lm.dims
    # ceil(x - 0.5) is the nearest integer with ties resolved downward
    ix = np.clip(np.ceil(xs - 0.5), 0, nx - 1).astype(np.intp)
    iy = np.clip(np.ceil(ys - 0.5), 0, ny - 1).astype(np.intp)
    iz = np.clip(np.ceil(zs - 0.5), 0, nz - 1).astype(np.intp)
    return lm.data[ix, iy, iz]


def nearest_sample(lm: LabelMap, p: GridPoint) -> int:
    """Label of the voxel center nearest to ``p`` (clamped at the boundary)."""
    return int(nearest_sample_many(lm, [p[0]], [p[1]], [p[2]])[0])


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized sampled Gaussian with radius ceil(3*sigma)."""
    if sigma < 0:
        raise InvalidParameterError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return np.array([1.0])
    radius = math.ceil(3.0 * sigma)
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    w = np.exp(-(offsets**2) / (2.0 * sigma * sigma))
    return w / w.sum()


def _convolve1d_replicate(arr: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    """1D convolution along ``axis`` with edge replication, float64 accumulation."""
    radius = len(kernel) // 2
    pad = [(radius, radius) if ax == axis else (0, 0) for ax in range(arr.ndim)]
    padded = np.pad(np.asarray(arr, dtype=np.float64), pad, mode="edge")
    out = np.zeros(arr.shape, dtype=np.float64)
    index = [slice(None)] * arr.ndim
    for offset, weight in enumerate(kernel):
        index[axis] = slice(offset, offset + arr.shape[axis])
        out += weight * padded[tuple(index)]
    return out


def gaussian_smooth_array(arr: np.ndarray, sigma_vox: float) -> np.ndarray:
    """Separable Gaussian smoothing of a raw 3D array (float64 result)."""
    if sigma_vox < 0:
        raise InvalidParameterError(f"sigma_vox must be >= 0, got {sigma_vox}")
    if sigma_vox == 0:
        return np.asarray(arr, dtype=np.float64).copy()
    kernel = gaussian_kernel(sigma_vox)
    out = np.asarray(arr, dtype=np.float64)
    for axis in range(3):
        if arr.shape[axis] > 1:
            out = _convolve1d_replicate(out, kernel, axis)
    return out


def gaussian_smooth(vol: ScalarVolume, sigma_vox: float) -> ScalarVolume:
    """Separable Gaussian convolution with edge replication.

    Kernel radius is ceil(3*sigma_vox); sigma 0 returns the input unchanged.
    """
    if sigma_vox < 0:
        raise InvalidParameterError(f"sigma_vox must be >= 0, got {sigma_vox}")
    if sigma_vox == 0:
        return vol
    return ScalarVolume(gaussian_smooth_array(vol.data, sigma_vox), vol.spacing)


def downsample2x(vol: ScalarVolume) -> ScalarVolume:
    """Gaussian pre-smooth (sigma 1 voxel) then 2x decimation.

    Axes of size 1 pass through untouched; every axis of size >= 2 is
    decimated to ceil(n/2) samples (even indices) with its spacing doubled.
    """
    dims = vol.dims
    if all(n < 2 for n in dims):
        raise InvalidParameterError(f"nothing to decimate: dims {dims}")
    kernel = gaussian_kernel(1.0)
    out = np.asarray(vol.data, dtype=np.float64)
    for axis in range(3):
        if dims[axis] >= 2:
            out = _convolve1d_replicate(out, kernel, axis)
    slices = tuple(slice(None, None, 2) if n >= 2 else slice(None) for n in dims)
    spacing = tuple(s * 2 if n >= 2 else s for s, n in zip(vol.spacing, dims))
    return ScalarVolume(out[slices], spacing)
