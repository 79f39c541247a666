"""Shared fixtures and independent oracles used across the test suite."""

from __future__ import annotations

import struct

import numpy as np

from cineprop import io
from cineprop.phantom import PhantomSpec, generate_cine
from cineprop.volume import LabelMap, ScalarVolume

TINY_CINE_SPEC = PhantomSpec(
    dims=(20, 20, 20),
    lv_radius_es=5.0,
    lv_radius_ed=4.2,
    myo_thickness=2.0,
    rv_offset=(-6.0, 0.0, 0.0),
    rv_radius=3.0,
    frames=4,
    es_index=0,
    ed_index=3,
    noise_sigma=4.0,
    seed=11,
)


def write_cine_dir(out, spec=TINY_CINE_SPEC, vendor="A", subject="subj"):
    """Write a phantom cine as MVOL frames + labels + manifest; returns (manifest_path, cine)."""
    out.mkdir(parents=True, exist_ok=True)
    cine = generate_cine(spec)
    frame_paths = []
    for t, frame in enumerate(cine.series.frames):
        p = out / f"frame_{t:03d}.mvol"
        io.write_mvol(frame, p)
        frame_paths.append(p)
    for t, lab in enumerate(cine.ground_truth):
        io.write_mvol(lab, out / f"label_{t:03d}.mvol")
    manifest = io.CineManifest(
        subject_id=subject,
        frame_paths=tuple(frame_paths),
        es_index=spec.es_index,
        ed_index=spec.ed_index,
        es_label_path=out / f"label_{spec.es_index:03d}.mvol",
        ed_label_path=out / f"label_{spec.ed_index:03d}.mvol",
        vendor=vendor,
        center="1",
    )
    mpath = out / "manifest.txt"
    io.write_manifest(manifest, mpath)
    return mpath, cine


def build_nifti_bytes(
    data: np.ndarray,
    spacing=(1.0, 1.0, 1.0),
    datatype: int | None = None,
    scl_slope: float = 0.0,
    scl_inter: float = 0.0,
    magic: bytes = b"n+1\x00",
    vox_offset: float = 352.0,
    ndim: int = 3,
) -> bytes:
    """Hand-assemble a single-file NIfTI-1 byte stream at the standard offsets."""
    codes = {np.uint8: 2, np.int16: 4, np.float32: 16, np.float64: 64, np.uint16: 512}
    data = np.asarray(data)
    if datatype is None:
        datatype = codes[data.dtype.type]
    bitpix = data.dtype.itemsize * 8

    header = bytearray(348)
    struct.pack_into("<i", header, 0, 348)
    dim = [ndim, *data.shape] + [1] * (7 - data.ndim)
    struct.pack_into("<8h", header, 40, *dim)
    struct.pack_into("<h", header, 70, datatype)
    struct.pack_into("<h", header, 72, bitpix)
    pixdim = [1.0, *spacing] + [0.0] * (7 - len(spacing))
    struct.pack_into("<8f", header, 76, *pixdim)
    struct.pack_into("<f", header, 108, vox_offset)
    struct.pack_into("<2f", header, 112, scl_slope, scl_inter)
    header[344:348] = magic

    offset = int(vox_offset)
    payload = data.ravel(order="F").tobytes()
    return bytes(header) + b"\x00" * (offset - 348) + payload


def random_volume(rng: np.random.Generator, max_dim: int = 16, spacing=None) -> ScalarVolume:
    dims = tuple(int(rng.integers(1, max_dim + 1)) for _ in range(3))
    if spacing is None:
        spacing = tuple(float(s) for s in rng.choice([0.5, 1.0, 1.25, 2.0], size=3))
    data = rng.normal(100.0, 25.0, size=dims).astype(np.float32)
    return ScalarVolume(data, spacing)


def random_label_map(rng: np.random.Generator, max_dim: int = 8, spacing=(1.0, 1.0, 1.0)) -> LabelMap:
    dims = tuple(int(rng.integers(1, max_dim + 1)) for _ in range(3))
    return LabelMap(rng.integers(0, 4, size=dims).astype(np.uint8), spacing)


def dice_oracle(pred: LabelMap, gt: LabelMap, label: int) -> float:
    """Dice by explicit voxel enumeration."""
    n_pred = n_gt = n_both = 0
    nx, ny, nz = pred.dims
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                p = pred.data[i, j, k] == label
                g = gt.data[i, j, k] == label
                n_pred += p
                n_gt += g
                n_both += p and g
    if n_pred + n_gt == 0:
        return 1.0
    return 2.0 * n_both / (n_pred + n_gt)


def hausdorff_oracle(pred: LabelMap, gt: LabelMap, label: int) -> float:
    """Symmetric Hausdorff via the full O(N^2) pairwise distance matrix."""
    base = min(pred.spacing)
    ratio = np.asarray(pred.spacing, dtype=np.float64) / base
    p = np.argwhere(pred.data == label).astype(np.float64) * ratio
    g = np.argwhere(gt.data == label).astype(np.float64) * ratio
    assert len(p) > 0 and len(g) > 0
    dist = np.sqrt(((p[:, None, :] - g[None, :, :]) ** 2).sum(axis=2))
    directed_pg = dist.min(axis=1).max()
    directed_gp = dist.min(axis=0).max()
    return base * float(max(directed_pg, directed_gp))


def trilinear_oracle(vol: ScalarVolume, x: float, y: float, z: float) -> float:
    """Scalar trilinear interpolation written out long-hand (clamped)."""
    nx, ny, nz = vol.dims
    x = min(max(x, 0.0), nx - 1.0)
    y = min(max(y, 0.0), ny - 1.0)
    z = min(max(z, 0.0), nz - 1.0)
    x0 = min(int(np.floor(x)), max(nx - 2, 0))
    y0 = min(int(np.floor(y)), max(ny - 2, 0))
    z0 = min(int(np.floor(z)), max(nz - 2, 0))
    x1, y1, z1 = min(x0 + 1, nx - 1), min(y0 + 1, ny - 1), min(z0 + 1, nz - 1)
    fx, fy, fz = x - x0, y - y0, z - z0
    d = vol.data
    val = 0.0
    for ci, wi in ((x0, 1 - fx), (x1, fx)):
        for cj, wj in ((y0, 1 - fy), (y1, fy)):
            for ck, wk in ((z0, 1 - fz), (z1, fz)):
                val += wi * wj * wk * float(d[ci, cj, ck])
    return val


def dense_gaussian_oracle(data: np.ndarray, sigma: float) -> np.ndarray:
    """Full 3D convolution with the normalized sampled Gaussian, edge replication."""
    radius = int(np.ceil(3.0 * sigma))
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    k1 = np.exp(-(offsets**2) / (2.0 * sigma * sigma))
    k1 /= k1.sum()
    kernel = k1[:, None, None] * k1[None, :, None] * k1[None, None, :]
    nx, ny, nz = data.shape
    out = np.zeros(data.shape, dtype=np.float64)
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                acc = 0.0
                for di in range(-radius, radius + 1):
                    for dj in range(-radius, radius + 1):
                        for dk in range(-radius, radius + 1):
                            ii = min(max(i + di, 0), nx - 1)
                            jj = min(max(j + dj, 0), ny - 1)
                            kk = min(max(k + dk, 0), nz - 1)
                            acc += kernel[di + radius, dj + radius, dk + radius] * float(data[ii, jj, kk])
                out[i, j, k] = acc
    return out


def shift_volume(vol: ScalarVolume, shift: tuple[int, int, int]) -> ScalarVolume:
    """Integer-voxel content shift with edge clamping: out(v) = in(v - shift)."""
    nx, ny, nz = vol.dims
    ii = np.clip(np.arange(nx) - shift[0], 0, nx - 1)
    jj = np.clip(np.arange(ny) - shift[1], 0, ny - 1)
    kk = np.clip(np.arange(nz) - shift[2], 0, nz - 1)
    return ScalarVolume(vol.data[np.ix_(ii, jj, kk)], vol.spacing)
