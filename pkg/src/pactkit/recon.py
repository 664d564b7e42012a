"""Universal backprojection reconstruction and measurement pre-smoothing.

The filtered datum b(t) = 2 p(t) - 2 t dp/dt is evaluated at the retarded
time |r - r0|/c0 of every (voxel, transducer) pair by linear interpolation
and accumulated with solid-angle weights proportional to
cos(theta)/distance^2 (theta measured from the element's inward normal),
normalized to sum to one per voxel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import convolve1d

from .forward import PressureTensor
from .geometry import SystemConfig, TransducerPose, VoxelGrid, pose_arrays

__all__ = ["Volume", "time_derivative", "presmooth", "ubp", "ubp_points"]

FWHM_TO_SIGMA = 1.0 / (2.0 * np.sqrt(2.0 * np.log(2.0)))


@dataclass
class Volume:
    """Reconstructed image on a voxel grid."""

    grid: VoxelGrid
    data: np.ndarray

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data)
        if self.data.shape != tuple(self.grid.dims):
            raise ValueError("volume data shape does not match its grid")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("volume contains non-finite values")


def time_derivative(trace, dt: float) -> np.ndarray:
    """d/dt by central differences (one-sided at the ends), any leading shape."""
    trace = np.asarray(trace, dtype=float)
    if trace.shape[-1] < 3:
        raise ValueError("need at least 3 samples to differentiate")
    out = np.empty_like(trace)
    out[..., 1:-1] = (trace[..., 2:] - trace[..., :-2]) / (2.0 * dt)
    out[..., 0] = (trace[..., 1] - trace[..., 0]) / dt
    out[..., -1] = (trace[..., -1] - trace[..., -2]) / dt
    return out


def presmooth(p: PressureTensor, fwhm_target: float, config: SystemConfig) -> PressureTensor:
    """Temporal Gaussian smoothing targeting a spatial FWHM of fwhm_target mm.

    The temporal FWHM is fwhm_target / c0; the kernel is truncated at four
    standard deviations and renormalized to unit sum.
    """
    if fwhm_target <= 0:
        raise ValueError("fwhm_target must be positive")
    if fwhm_target < 2.0 * config.sos * config.dt:
        raise ValueError("fwhm_target below twice the spatial sample spacing is unresolvable")
    sigma_samples = (fwhm_target / config.sos) * FWHM_TO_SIGMA / config.dt
    half = int(np.ceil(4.0 * sigma_samples))
    offsets = np.arange(-half, half + 1)
    kernel = np.exp(-0.5 * (offsets / sigma_samples) ** 2)
    kernel /= kernel.sum()
    smoothed = convolve1d(np.asarray(p.data, dtype=float), kernel, axis=-1, mode="constant")
    return PressureTensor(smoothed, p.config_hash)


def _pose_matrices(array, config: SystemConfig):
    """Flatten poses to (n_q, 3) centers/inward normals plus patch areas.

    With elements laid out on a polar-by-azimuth grid, the aperture area a
    detector stands in for scales with the sine of its polar angle; leaving
    that factor out over-weights detectors near the pole.
    """
    if array is None:
        centers, _, _, axis_z = pose_arrays(config)
        # element-major flattening, matching data.reshape(n_r * n_v, n_t)
        centers, normals = centers.reshape(-1, 3), axis_z.reshape(-1, 3)
    else:
        centers = np.stack([p.center for p in array])
        normals = np.stack([p.axis_z for p in array])
    radial = np.linalg.norm(centers, axis=1)
    area = np.hypot(centers[:, 0], centers[:, 1]) / np.where(radial > 0, radial, 1.0)
    return centers, normals, area


def ubp_points(
    p: PressureTensor,
    array: list[TransducerPose] | None,
    config: SystemConfig,
    points,
) -> np.ndarray:
    """Backproject onto arbitrary points (n, 3); returns n values.

    When array is None the poses implied by config are used with
    element-major pairing against the data tensor; an explicit pose list is
    paired view-major, the build_array order.
    """
    if config.sos <= 0:
        raise ValueError("speed of sound must be positive")
    data = np.asarray(p.data, dtype=float)
    nr, nv, nt = data.shape
    if array is not None and len(array) != nr * nv:
        raise ValueError("pose list does not match tensor shape")
    centers, normals, area = _pose_matrices(array, config)
    if array is None:
        traces = data.reshape(nr * nv, nt)
    else:
        traces = data.transpose(1, 0, 2).reshape(nr * nv, nt)

    times = config.times
    b = 2.0 * traces - 2.0 * times[None, :] * time_derivative(traces, config.dt)

    pts = np.atleast_2d(np.asarray(points, dtype=float))
    n_pts = pts.shape[0]
    n_q = centers.shape[0]
    num = np.zeros(n_pts)
    den = np.zeros(n_pts)
    inv_cdt = 1.0 / (config.sos * config.dt)

    if n_pts <= n_q:
        for i in range(n_pts):
            dvec = pts[i] - centers
            dist = np.maximum(np.sqrt((dvec * dvec).sum(1)), 1e-12)
            cos = (dvec * normals).sum(1) / dist
            w = area * np.clip(cos, 0.0, None) / (dist * dist)
            ti = dist * inv_cdt
            ok = (ti >= 0.0) & (ti <= nt - 1)
            i0 = np.clip(ti.astype(np.int64), 0, nt - 2)
            frac = ti - i0
            vals = b[np.arange(n_q), i0] * (1.0 - frac) + b[np.arange(n_q), i0 + 1] * frac
            w = np.where(ok, w, 0.0)
            num[i] = (w * np.where(ok, vals, 0.0)).sum()
            den[i] = w.sum()
    else:
        for q in range(n_q):
            dvec = pts - centers[q]
            dist = np.maximum(np.sqrt((dvec * dvec).sum(1)), 1e-12)
            cos = (dvec @ normals[q]) / dist
            w = area[q] * np.clip(cos, 0.0, None) / (dist * dist)
            ti = dist * inv_cdt
            ok = (ti >= 0.0) & (ti <= nt - 1)
            i0 = np.clip(ti.astype(np.int64), 0, nt - 2)
            frac = ti - i0
            vals = b[q, i0] * (1.0 - frac) + b[q, i0 + 1] * frac
            w = np.where(ok, w, 0.0)
            num += w * np.where(ok, vals, 0.0)
            den += w
    out = np.zeros(n_pts)
    nonzero = den > 0
    out[nonzero] = num[nonzero] / den[nonzero]
    return out


def ubp(
    p: PressureTensor,
    array: list[TransducerPose] | None,
    config: SystemConfig,
    grid: VoxelGrid,
    mask=None,
) -> Volume:
    """Universal backprojection onto a voxel grid.

    mask, when given, is a boolean array over the grid; only masked voxels
    are reconstructed (the rest stay zero). Useful for shell-restricted
    evaluation where the full grid would be wasteful.
    """
    if mask is None:
        values = ubp_points(p, array, config, grid.points())
        return Volume(grid, values.reshape(grid.dims))
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != tuple(grid.dims):
        raise ValueError("mask shape does not match grid dims")
    pts = grid.points()[mask.ravel()]
    data = np.zeros(grid.dims)
    if pts.size:
        data[mask] = ubp_points(p, array, config, pts)
    return Volume(grid, data)
