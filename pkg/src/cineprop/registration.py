"""Three-stage intra-subject registration: rigid, affine, then deformable.

All stages share one optimizer contract: multi-resolution coarse-to-fine,
central finite-difference gradients over normalized parameters, step halving
on non-improvement, and a stop on small relative improvement.  The deformable
stage is an intensity-difference-driven displacement-field optimizer with
Gaussian field regularization; its output folds the affine initialization
into one total field.

Conventions:

* ``AffineTransform`` maps fixed-image physical points (mm) to moving-image
  physical points: ``p_moving = matrix @ p_fixed + translation``.
* ``DisplacementField`` lives on the fixed grid; ``vectors[i,j,k]`` is the
  mm offset added to voxel ``(i,j,k)``'s position before sampling the moving
  image (pull-back convention).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, InvalidParameterError
from .volume import (
    LabelMap,
    ScalarVolume,
    downsample2x,
    gaussian_smooth_array,
    nearest_sample_many,
    trilinear_sample_many,
)

SIMILARITY_KINDS = ("mse", "ncc")

_MIN_STEP_FRACTION = 1e-3  # line search gives up below this fraction of step_size
_FD_FRACTION = 0.1  # finite-difference probe: one tenth of a parameter unit
_CONVERGENCE_WINDOW = 5  # iterations over which relative improvement is measured
_MAX_OBJECTIVE_SAMPLES = 48_000  # rigid/affine objectives subsample above this


@dataclass(frozen=True, eq=False)
class AffineTransform:
    """Invertible affine map of physical coordinates (mm)."""

    matrix: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64).reshape(3, 3).copy()
        t = np.asarray(self.translation, dtype=np.float64).reshape(3).copy()
        if not (np.all(np.isfinite(m)) and np.all(np.isfinite(t))):
            raise InvalidParameterError("affine transform must be finite")
        if abs(np.linalg.det(m)) < 1e-12:
            raise InvalidParameterError("affine matrix is singular")
        m.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points_mm: np.ndarray) -> np.ndarray:
        """Map an (N, 3) array of physical points."""
        pts = np.asarray(points_mm, dtype=np.float64)
        return pts @ self.matrix.T + self.translation

    def is_rigid(self, tol: float = 1e-6) -> bool:
        return bool(np.max(np.abs(self.matrix.T @ self.matrix - np.eye(3))) <= tol)


@dataclass(frozen=True, eq=False)
class DisplacementField:
    """Per-voxel mm displacements on the fixed grid."""

    vectors: np.ndarray
    spacing: tuple[float, float, float]

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 4 or v.shape[3] != 3:
            raise InvalidParameterError(f"field must have shape (nx, ny, nz, 3), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise InvalidParameterError("field contains non-finite components")
        v = np.ascontiguousarray(v)
        v.flags.writeable = False
        object.__setattr__(self, "vectors", v)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.vectors.shape[:3]


@dataclass(frozen=True)
class RegistrationParams:
    pyramid_levels: int = 3
    iterations_per_level: tuple[int, ...] = (50, 50, 30)  # coarse -> fine
    similarity: str = "ncc"
    step_size: float = 0.5  # voxels (and degrees) moved per accepted step
    demons_sigma_vox: float = 1.5
    convergence_tol: float = 1e-4

    def __post_init__(self):
        if self.pyramid_levels < 1:
            raise InvalidParameterError("pyramid_levels must be >= 1")
        iters = tuple(int(i) for i in self.iterations_per_level)
        if len(iters) != self.pyramid_levels:
            raise InvalidParameterError(
                f"iterations_per_level has {len(iters)} entries for {self.pyramid_levels} levels"
            )
        if any(i < 1 for i in iters):
            raise InvalidParameterError("iteration counts must be >= 1")
        if self.similarity not in SIMILARITY_KINDS:
            raise InvalidParameterError(f"similarity must be one of {SIMILARITY_KINDS}")
        if self.step_size <= 0:
            raise InvalidParameterError("step_size must be > 0")
        if self.demons_sigma_vox < 0:
            raise InvalidParameterError("demons_sigma_vox must be >= 0")
        if self.convergence_tol <= 0:
            raise InvalidParameterError("convergence_tol must be > 0")
        object.__setattr__(self, "iterations_per_level", iters)


def _similarity_flat(a: np.ndarray, b: np.ndarray, kind: str) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if kind == "mse":
        d = a - b
        return float(np.mean(d * d))
    if kind == "ncc":
        ac = a - a.mean()
        bc = b - b.mean()
        va = float(np.dot(ac, ac))
        vb = float(np.dot(bc, bc))
        if va == 0.0 or vb == 0.0:
            return 0.0
        return -float(np.dot(ac, bc) / math.sqrt(va * vb))
    raise InvalidParameterError(f"similarity must be one of {SIMILARITY_KINDS}")


def similarity(fixed: ScalarVolume, warped: ScalarVolume, kind: str) -> float:
    """Image dissimilarity, lower is better.

    ``mse`` is the mean squared intensity difference; ``ncc`` is the negative
    normalized cross-correlation in [-1, 1], defined as 0 when either image
    is constant.
    """
    if fixed.dims != warped.dims:
        raise InvalidParameterError(f"dims mismatch: {fixed.dims} vs {warped.dims}")
    return _similarity_flat(fixed.data, warped.data, kind)


def _grid_mm(dims, spacing) -> np.ndarray:
    """(N, 3) physical coordinates of all voxel centers, C-index order."""
    axes = [np.arange(n, dtype=np.float64) * s for n, s in zip(dims, spacing)]
    ii, jj, kk = np.meshgrid(*axes, indexing="ij")
    return np.stack([ii.ravel(), jj.ravel(), kk.ravel()], axis=1)


def _resample_affine_data(moving: ScalarVolume, matrix, translation, dims, spacing) -> np.ndarray:
    pts = _grid_mm(dims, spacing) @ np.asarray(matrix, dtype=np.float64).T + translation
    ms = moving.spacing
    vals = trilinear_sample_many(moving, pts[:, 0] / ms[0], pts[:, 1] / ms[1], pts[:, 2] / ms[2])
    return vals.reshape(dims)


def resample_affine(moving: ScalarVolume, transform: AffineTransform, like: ScalarVolume) -> ScalarVolume:
    """Pull-back resampling of ``moving`` through an affine onto ``like``'s grid."""
    data = _resample_affine_data(moving, transform.matrix, transform.translation, like.dims, like.spacing)
    return ScalarVolume(data.astype(np.float32), like.spacing)


def affine_to_field(transform: AffineTransform, dims, spacing) -> DisplacementField:
    """The displacement field realizing an affine on a given fixed grid."""
    grid = _grid_mm(dims, spacing)
    disp = transform.apply(grid) - grid
    return DisplacementField(disp.reshape(*dims, 3), tuple(spacing))


def warp_image(moving: ScalarVolume, field: DisplacementField) -> ScalarVolume:
    """Sample the moving image at each fixed-grid point offset by the field."""
    dims = field.dims
    ms = moving.spacing
    idx = [np.arange(n, dtype=np.float64) for n in dims]
    ii, jj, kk = np.meshgrid(*idx, indexing="ij")
    u = field.vectors
    vals = trilinear_sample_many(
        moving,
        (ii + u[..., 0] / ms[0]).ravel(),
        (jj + u[..., 1] / ms[1]).ravel(),
        (kk + u[..., 2] / ms[2]).ravel(),
    )
    return ScalarVolume(vals.reshape(dims).astype(np.float32), field.spacing)


def warp_label(moving: LabelMap, field: DisplacementField) -> LabelMap:
    """As warp_image but with nearest-neighbor lookup, so class codes never blend."""
    dims = field.dims
    ms = moving.spacing
    idx = [np.arange(n, dtype=np.float64) for n in dims]
    ii, jj, kk = np.meshgrid(*idx, indexing="ij")
    u = field.vectors
    labels = nearest_sample_many(
        moving,
        (ii + u[..., 0] / ms[0]).ravel(),
        (jj + u[..., 1] / ms[1]).ravel(),
        (kk + u[..., 2] / ms[2]).ravel(),
    )
    return LabelMap(labels.reshape(dims), field.spacing)


def _check_pair(fixed: ScalarVolume, moving: ScalarVolume) -> None:
    if not np.allclose(fixed.spacing, moving.spacing):
        raise InvalidParameterError(f"spacing mismatch: {fixed.spacing} vs {moving.spacing}")
    if fixed.is_constant():
        raise DegenerateInputError("fixed image is constant; no gradient signal")
    if moving.is_constant():
        raise DegenerateInputError("moving image is constant; no gradient signal")


def _build_pyramid(vol: ScalarVolume, levels: int) -> list[ScalarVolume]:
    """Coarse-to-fine pyramid; extra levels stop once the grid is too small to halve."""
    pyramid = [vol]
    while len(pyramid) < levels and max(pyramid[-1].dims) >= 4:
        pyramid.append(downsample2x(pyramid[-1]))
    return pyramid[::-1]


def _descend(objective, theta0, units, iterations, step_size, tol):
    """Descent over unit-normalized parameters with step halving on non-improvement.

    Search directions are conjugate-gradient (Polak-Ribiere) combinations of
    central finite-difference gradients, which follow the curved valleys that
    couple rotation/scale with translation far better than raw steepest
    descent.  Failed line searches restart from the plain gradient direction.
    Returns (theta, trace); trace holds the accepted objective values and is
    non-increasing by construction.
    """
    theta = np.asarray(theta0, dtype=np.float64).copy()
    units = np.asarray(units, dtype=np.float64)
    probes = _FD_FRACTION * units
    f_cur = objective(theta)
    trace = [f_cur]
    lam = step_size
    g_prev = None
    d_prev = None
    window: list[float] = [f_cur]
    for _ in range(iterations):
        grad_units = np.zeros_like(theta)
        for i in range(len(theta)):
            plus = theta.copy()
            plus[i] += probes[i]
            minus = theta.copy()
            minus[i] -= probes[i]
            # directional change per unit step of parameter i
            grad_units[i] = (objective(plus) - objective(minus)) / (2.0 * _FD_FRACTION)
        if g_prev is not None:
            beta = max(0.0, float(grad_units @ (grad_units - g_prev)) / float(g_prev @ g_prev))
            d = -grad_units + beta * d_prev
        else:
            d = -grad_units
        norm = float(np.linalg.norm(d))
        if norm == 0.0:
            break
        direction = (d / norm) * units
        accepted = False
        while lam >= _MIN_STEP_FRACTION * step_size:
            candidate = theta + lam * direction
            f_cand = objective(candidate)
            if f_cand < f_cur:
                theta = candidate
                f_cur = f_cand
                trace.append(f_cur)
                lam = min(lam * 1.5, step_size)
                accepted = True
                g_prev, d_prev = grad_units, d
                break
            lam *= 0.5
        if not accepted:
            if d_prev is None:
                break  # even the steepest direction fails: converged
            g_prev = d_prev = None  # restart from the plain gradient
            lam = 0.25 * step_size
            continue
        # converged once a whole window of iterations improves by less than tol
        window.append(f_cur)
        if len(window) > _CONVERGENCE_WINDOW:
            start = window.pop(0)
            if (start - f_cur) / max(abs(start), 1e-12) < tol:
                break
    return theta, trace


def _center_mm(vol: ScalarVolume) -> np.ndarray:
    return (np.asarray(vol.dims, dtype=np.float64) - 1.0) / 2.0 * np.asarray(vol.spacing)


def _rotation_matrix(rx: float, ry: float, rz: float) -> np.ndarray:
    cx, sx = math.cos(rx), math.sin(rx)
    cy, sy = math.cos(ry), math.sin(ry)
    cz, sz = math.cos(rz), math.sin(rz)
    mx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]], dtype=np.float64)
    my = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]], dtype=np.float64)
    mz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]], dtype=np.float64)
    return mz @ my @ mx


def _pose_to_transform(theta, center) -> AffineTransform:
    """6-parameter pose (rx, ry, rz, tx, ty, tz) rotating about ``center``."""
    rot = _rotation_matrix(theta[0], theta[1], theta[2])
    translation = center - rot @ center + np.asarray(theta[3:6], dtype=np.float64)
    return AffineTransform(rot, translation)


def _affine_params_to_transform(theta, center) -> AffineTransform:
    matrix = np.asarray(theta[:9], dtype=np.float64).reshape(3, 3)
    t_center = np.asarray(theta[9:12], dtype=np.float64)
    return AffineTransform(matrix, t_center + center - matrix @ center)


def _transform_to_affine_params(transform: AffineTransform, center) -> np.ndarray:
    t_center = transform.matrix @ center + transform.translation - center
    return np.concatenate([transform.matrix.ravel(), t_center])


def _level_objective(fixed_level: ScalarVolume, moving_level: ScalarVolume, kind: str, to_transform):
    """Objective over a deterministic sample of the fixed grid.

    Above _MAX_OBJECTIVE_SAMPLES voxels the grid is strided, which keeps one
    gradient evaluation cheap at fine pyramid levels without giving up
    determinism.
    """
    dims, spacing = fixed_level.dims, fixed_level.spacing
    n_total = dims[0] * dims[1] * dims[2]
    stride = max(1, round(np.cbrt(n_total / _MAX_OBJECTIVE_SAMPLES) + 0.49999))
    axes = [np.arange(0, n, stride, dtype=np.float64) * s for n, s in zip(dims, spacing)]
    ii, jj, kk = np.meshgrid(*axes, indexing="ij")
    grid = np.stack([ii.ravel(), jj.ravel(), kk.ravel()], axis=1)
    fsample = fixed_level.data[::stride, ::stride, ::stride].ravel()
    ms = moving_level.spacing

    def objective(theta) -> float:
        try:
            tf = to_transform(theta)
        except InvalidParameterError:
            return math.inf  # singular candidate: reject, the line search backs off
        pts = grid @ tf.matrix.T + tf.translation
        warped = trilinear_sample_many(moving_level, pts[:, 0] / ms[0], pts[:, 1] / ms[1], pts[:, 2] / ms[2])
        return _similarity_flat(fsample, warped, kind)

    return objective


def _full_res_objective(fixed, moving, kind, transform) -> float:
    warped = _resample_affine_data(moving, transform.matrix, transform.translation, fixed.dims, fixed.spacing)
    return _similarity_flat(fixed.data, warped, kind)


def register_rigid(fixed: ScalarVolume, moving: ScalarVolume, params: RegistrationParams) -> AffineTransform:
    """Recover a 6-DOF rigid transform (rotation about the fixed center + translation).

    The result never scores worse than the identity transform at full
    resolution; the rotation block is orthonormal by parametrization.
    """
    _check_pair(fixed, moving)
    center = _center_mm(fixed)
    pyr_f = _build_pyramid(fixed, params.pyramid_levels)
    pyr_m = _build_pyramid(moving, params.pyramid_levels)
    iters = params.iterations_per_level[-len(pyr_f) :]
    theta = np.zeros(6)
    deg = math.pi / 180.0
    for f_l, m_l, n_iter in zip(pyr_f, pyr_m, iters):
        units = np.array([deg, deg, deg, *f_l.spacing])
        obj = _level_objective(f_l, m_l, params.similarity, lambda th: _pose_to_transform(th, center))
        theta, _ = _descend(obj, theta, units, n_iter, params.step_size, params.convergence_tol)
    result = _pose_to_transform(theta, center)
    identity = AffineTransform.identity()
    if _full_res_objective(fixed, moving, params.similarity, result) > _full_res_objective(
        fixed, moving, params.similarity, identity
    ):
        return identity
    return result


def register_affine(
    fixed: ScalarVolume, moving: ScalarVolume, init: AffineTransform, params: RegistrationParams
) -> AffineTransform:
    """12-DOF refinement of an initial transform; never scores worse than it."""
    _check_pair(fixed, moving)
    center = _center_mm(fixed)
    pyr_f = _build_pyramid(fixed, params.pyramid_levels)
    pyr_m = _build_pyramid(moving, params.pyramid_levels)
    iters = params.iterations_per_level[-len(pyr_f) :]
    theta = _transform_to_affine_params(init, center)
    half_diag = float(np.linalg.norm(_center_mm(fixed))) or 1.0
    for f_l, m_l, n_iter in zip(pyr_f, pyr_m, iters):
        # a unit step of a matrix entry displaces the half-radius shell by ~1 voxel
        matrix_unit = min(f_l.spacing) / half_diag
        units = np.array([matrix_unit] * 9 + list(f_l.spacing))
        obj = _level_objective(f_l, m_l, params.similarity, lambda th: _affine_params_to_transform(th, center))
        theta, _ = _descend(obj, theta, units, n_iter, params.step_size, params.convergence_tol)
    result = _affine_params_to_transform(theta, center)
    if _full_res_objective(fixed, moving, params.similarity, result) > _full_res_objective(
        fixed, moving, params.similarity, init
    ):
        return init
    return result


def _sample_field_component(comp: np.ndarray, xs, ys, zs) -> np.ndarray:
    """Trilinear interpolation of one raw field component with clamping."""
    nx, ny, nz = comp.shape
    xs = np.clip(xs, 0.0, nx - 1.0)
    ys = np.clip(ys, 0.0, ny - 1.0)
    zs = np.clip(zs, 0.0, nz - 1.0)
    x0 = np.minimum(np.floor(xs), nx - 2 if nx > 1 else 0).astype(np.intp)
    y0 = np.minimum(np.floor(ys), ny - 2 if ny > 1 else 0).astype(np.intp)
    z0 = np.minimum(np.floor(zs), nz - 2 if nz > 1 else 0).astype(np.intp)
    x1 = np.minimum(x0 + 1, nx - 1)
    y1 = np.minimum(y0 + 1, ny - 1)
    z1 = np.minimum(z0 + 1, nz - 1)
    fx, fy, fz = xs - x0, ys - y0, zs - z0
    c000 = comp[x0, y0, z0].astype(np.float64)
    c00 = c000 + fx * (comp[x1, y0, z0] - c000)
    c10_base = comp[x0, y1, z0].astype(np.float64)
    c10 = c10_base + fx * (comp[x1, y1, z0] - c10_base)
    c01_base = comp[x0, y0, z1].astype(np.float64)
    c01 = c01_base + fx * (comp[x1, y0, z1] - c01_base)
    c11_base = comp[x0, y1, z1].astype(np.float64)
    c11 = c11_base + fx * (comp[x1, y1, z1] - c11_base)
    c0 = c00 + fy * (c10 - c00)
    c1 = c01 + fy * (c11 - c01)
    return c0 + fz * (c1 - c0)


def _upsample_field(u: np.ndarray, new_dims) -> np.ndarray:
    """Resample a (nx,ny,nz,3) mm-valued field onto a finer grid (fine = coarse*2)."""
    idx = [np.arange(n, dtype=np.float64) / 2.0 for n in new_dims]
    ii, jj, kk = np.meshgrid(*idx, indexing="ij")
    out = np.empty((*new_dims, 3), dtype=np.float64)
    for c in range(3):
        out[..., c] = _sample_field_component(u[..., c], ii, jj, kk).reshape(new_dims)
    return out


def _warp_data(moving_data: np.ndarray, u: np.ndarray, spacing) -> np.ndarray:
    dims = moving_data.shape
    idx = [np.arange(n, dtype=np.float64) for n in dims]
    ii, jj, kk = np.meshgrid(*idx, indexing="ij")
    xs = (ii + u[..., 0] / spacing[0]).ravel()
    ys = (jj + u[..., 1] / spacing[1]).ravel()
    zs = (kk + u[..., 2] / spacing[2]).ravel()
    return _sample_field_component(moving_data.astype(np.float64), xs, ys, zs).reshape(dims)


def _demons_level(
    fixed_level: ScalarVolume, moving_level: ScalarVolume, u: np.ndarray, n_iter: int, params: RegistrationParams
) -> np.ndarray:
    """Iterate intensity-difference updates on one pyramid level."""
    fdata = fixed_level.data.astype(np.float64)
    spacing = fixed_level.spacing
    mdata = moving_level.data.astype(np.float64)
    grads = np.gradient(fdata, *spacing) if min(fdata.shape) > 1 else None
    if grads is None:
        return u
    g2 = grads[0] ** 2 + grads[1] ** 2 + grads[2] ** 2
    mean_sq_spacing = float(np.mean(np.square(spacing)))

    def score(candidate: np.ndarray) -> float:
        return _similarity_flat(fdata, _warp_data(mdata, candidate, spacing), params.similarity)

    grad_stack = np.stack(grads, axis=-1)
    f_cur = score(u)
    lam = 1.0
    window = [f_cur]
    for _ in range(n_iter):
        warped = _warp_data(mdata, u, spacing)
        diff = warped - fdata
        denom = g2 + diff * diff / mean_sq_spacing
        scale = np.where(denom > 1e-12, -diff / np.maximum(denom, 1e-12), 0.0)
        accepted = False
        while lam >= 1e-3:
            candidate = u + (lam * scale)[..., None] * grad_stack
            if params.demons_sigma_vox > 0:
                for c in range(3):
                    candidate[..., c] = gaussian_smooth_array(candidate[..., c], params.demons_sigma_vox)
            f_cand = score(candidate)
            if f_cand < f_cur:
                u = candidate
                f_cur = f_cand
                lam = min(lam * 1.5, 1.0)
                accepted = True
                break
            lam *= 0.5
        if not accepted:
            break
        window.append(f_cur)
        if len(window) > _CONVERGENCE_WINDOW:
            start = window.pop(0)
            if (start - f_cur) / max(abs(start), 1e-12) < params.convergence_tol:
                break
    return u


def register_deformable(
    fixed: ScalarVolume, moving: ScalarVolume, init: AffineTransform, params: RegistrationParams
) -> DisplacementField:
    """Dense displacement field refining an affine initialization.

    The affine is applied first (one resampling of the moving image), the
    residual deformation is optimized coarse-to-fine, and the returned field
    is the algebraic composition of both, mapping fixed-grid points to
    moving-image sample positions.  The result never scores worse than the
    affine-initialized warp.
    """
    _check_pair(fixed, moving)
    moving_affine = resample_affine(moving, init, fixed)
    pyr_f = _build_pyramid(fixed, params.pyramid_levels)
    pyr_m = _build_pyramid(moving_affine, params.pyramid_levels)
    iters = params.iterations_per_level[-len(pyr_f) :]
    u: np.ndarray | None = None
    for f_l, m_l, n_iter in zip(pyr_f, pyr_m, iters):
        u = np.zeros((*f_l.dims, 3)) if u is None else _upsample_field(u, f_l.dims)
        u = _demons_level(f_l, m_l, u, n_iter, params)

    # total(v) = A(v_mm + u(v)) + b - v_mm : exact composition with the affine
    grid = _grid_mm(fixed.dims, fixed.spacing)
    total = (grid + u.reshape(-1, 3)) @ init.matrix.T + init.translation - grid
    total_field = DisplacementField(total.reshape(*fixed.dims, 3), fixed.spacing)

    affine_field = affine_to_field(init, fixed.dims, fixed.spacing)
    kind = params.similarity
    f_total = _similarity_flat(fixed.data, warp_image(moving, total_field).data, kind)
    f_affine = _similarity_flat(fixed.data, warp_image(moving, affine_field).data, kind)
    if f_total > f_affine:
        return affine_field
    return total_field
