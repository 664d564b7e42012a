"""Hemispherical measurement geometry: transducer array, local frames, voxel grids.

The measurement aperture is a hemispherical cap of radius ``aperture_radius``
populated by ``n_elements`` transducers along a polar arc; the arc is rotated
through ``n_views`` azimuthal positions. Units are mm, microseconds, and
mm/us throughout the package.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

__all__ = [
    "SystemConfig",
    "TransducerPose",
    "VoxelGrid",
    "build_array",
    "pose_arrays",
    "global_to_local",
    "desk_config",
    "config_hash",
]


@dataclass(frozen=True)
class SystemConfig:
    """Array geometry and temporal sampling of the measurement system.

    Defaults describe the full-scale system: 96 elements spanning polar
    angles 90.25 to 170.25 degrees on an 85 mm hemisphere, 320 views,
    2267 samples at 20 MHz, speed of sound 1.5 mm/us, and a 1.2 x 6 mm
    rectangular element whose long side lies along the view direction.
    """

    aperture_radius: float = 85.0
    polar_start: float = 90.25
    polar_end: float = 170.25
    n_elements: int = 96
    n_views: int = 320
    n_samples: int = 2267
    dt: float = 0.05
    sos: float = 1.5
    elem_a: float = 1.2
    elem_b: float = 6.0

    def __post_init__(self) -> None:
        if self.aperture_radius <= 0:
            raise ValueError("aperture_radius must be positive")
        if not (0.0 < self.polar_start < self.polar_end <= 180.0):
            raise ValueError("polar angles must satisfy 0 < start < end <= 180")
        if min(self.n_elements, self.n_views, self.n_samples) < 1:
            raise ValueError("n_elements, n_views, n_samples must be >= 1")
        if self.dt <= 0 or self.sos <= 0:
            raise ValueError("dt and sos must be positive")
        if self.elem_a <= 0 or self.elem_b <= 0:
            raise ValueError("element sides must be positive")

    @property
    def n_transducers(self) -> int:
        return self.n_elements * self.n_views

    @property
    def times(self) -> np.ndarray:
        """Sample times r*dt, r = 0..n_samples-1, in microseconds."""
        return np.arange(self.n_samples) * self.dt


@dataclass(frozen=True)
class TransducerPose:
    """Position and local orthonormal frame of one transducer.

    axis_x lies along the short element side (polar tangent), axis_y along
    the long side (azimuthal tangent), and axis_z is the inward normal
    pointing at the aperture center.
    """

    center: np.ndarray
    axis_x: np.ndarray
    axis_y: np.ndarray
    axis_z: np.ndarray

    def __post_init__(self) -> None:
        for name in ("center", "axis_x", "axis_y", "axis_z"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        frame = np.stack([self.axis_x, self.axis_y, self.axis_z])
        if not np.allclose(frame @ frame.T, np.eye(3), atol=1e-9):
            raise ValueError("pose axes must form an orthonormal frame")


@dataclass(frozen=True)
class VoxelGrid:
    """Regular isotropic voxel grid. origin is the center of voxel (0,0,0)."""

    origin: tuple[float, float, float] = (-60.0, -60.0, -60.0)
    spacing: float = 0.25
    dims: tuple[int, int, int] = (480, 480, 240)

    def __post_init__(self) -> None:
        if self.spacing <= 0:
            raise ValueError("spacing must be positive")
        if any(int(d) < 1 for d in self.dims):
            raise ValueError("dims must all be >= 1")
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))

    @property
    def n_voxels(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    def axis_coords(self, axis: int) -> np.ndarray:
        """Voxel center coordinates along one axis, in mm."""
        return self.origin[axis] + self.spacing * np.arange(self.dims[axis])

    def points(self) -> np.ndarray:
        """All voxel centers as an (n_voxels, 3) array, C order over dims."""
        ax = [self.axis_coords(i) for i in range(3)]
        xx, yy, zz = np.meshgrid(*ax, indexing="ij")
        return np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1)


def build_array(config: SystemConfig) -> list[TransducerPose]:
    """Place all transducers of the system.

    Returns a list of length n_elements * n_views ordered view-major: the
    pose of element q in view v is at index v * n_elements + q. Element 0
    sits at the smallest polar angle; view 0 at azimuth 0. Polar angles
    include both endpoints, i.e. the arc is divided into (n_elements - 1)
    equal steps; a single-element arc sits at polar_start.
    """
    centers, ax, ay, az = pose_arrays(config)
    poses = []
    for v in range(config.n_views):
        for q in range(config.n_elements):
            poses.append(
                TransducerPose(
                    center=centers[q, v],
                    axis_x=ax[q, v],
                    axis_y=ay[q, v],
                    axis_z=az[q, v],
                )
            )
    return poses


def pose_arrays(config: SystemConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized pose layout: four (n_elements, n_views, 3) arrays.

    Returns (centers, axis_x, axis_y, axis_z) indexed by (element, view),
    matching the PressureTensor data layout.
    """
    if config.n_elements < 1 or config.n_views < 1:
        raise ValueError("need at least one element and one view")
    nr, nv = config.n_elements, config.n_views
    if nr == 1:
        polar = np.array([config.polar_start])
    else:
        polar = np.linspace(config.polar_start, config.polar_end, nr)
    azim = np.arange(nv) * (360.0 / nv)
    th = np.deg2rad(polar)[:, None]
    ph = np.deg2rad(azim)[None, :]

    sin_th, cos_th = np.sin(th), np.cos(th)
    sin_ph, cos_ph = np.sin(ph), np.cos(ph)
    radial = np.stack(
        [
            np.broadcast_to(sin_th * cos_ph, (nr, nv)),
            np.broadcast_to(sin_th * sin_ph, (nr, nv)),
            np.broadcast_to(cos_th * np.ones_like(ph), (nr, nv)),
        ],
        axis=-1,
    )
    centers = config.aperture_radius * radial
    # Polar tangent (direction of increasing polar angle) carries the short
    # side a; azimuthal tangent carries the long side b, oriented toward
    # decreasing azimuth so that axis_x x axis_y = axis_z (right-handed
    # frame with the inward normal).
    axis_x = np.stack(
        [
            np.broadcast_to(cos_th * cos_ph, (nr, nv)),
            np.broadcast_to(cos_th * sin_ph, (nr, nv)),
            np.broadcast_to(-sin_th * np.ones_like(ph), (nr, nv)),
        ],
        axis=-1,
    )
    axis_y = np.stack(
        [
            np.broadcast_to(sin_ph * np.ones_like(th), (nr, nv)),
            np.broadcast_to(-cos_ph * np.ones_like(th), (nr, nv)),
            np.zeros((nr, nv)),
        ],
        axis=-1,
    )
    axis_z = -radial
    return centers, axis_x, axis_y, axis_z


def global_to_local(pose: TransducerPose, r) -> np.ndarray:
    """Express a global point r (mm) in the transducer's local frame.

    Returns ((r - center) . axis_x, (r - center) . axis_y, (r - center) . axis_z).
    """
    d = np.asarray(r, dtype=float) - pose.center
    return np.array([d @ pose.axis_x, d @ pose.axis_y, d @ pose.axis_z])


def local_to_global(pose: TransducerPose, local) -> np.ndarray:
    """Inverse of global_to_local."""
    lx, ly, lz = np.asarray(local, dtype=float)
    return pose.center + lx * pose.axis_x + ly * pose.axis_y + lz * pose.axis_z


_PRESETS = {
    "full": {},
    # Reduced system for fast tests. n_samples is kept large enough that the
    # 153.6 mm recording range covers every source inside the 60 mm support
    # seen from any element (85 + 60 + max radius).
    "desk": {"n_elements": 24, "n_views": 64, "n_samples": 2048},
}


def desk_config(scale_preset: str = "desk") -> SystemConfig:
    """Return a preset SystemConfig; presets are "full" and "desk"."""
    try:
        overrides = _PRESETS[scale_preset]
    except KeyError:
        raise ValueError(f"unknown scale preset: {scale_preset!r}") from None
    return SystemConfig(**overrides)


def config_hash(config: SystemConfig) -> str:
    """Stable short identifier for a SystemConfig, used to tag data files."""
    canon = "|".join(
        f"{k}={getattr(config, k)!r}"
        for k in (
            "aperture_radius",
            "polar_start",
            "polar_end",
            "n_elements",
            "n_views",
            "n_samples",
            "dt",
            "sos",
            "elem_a",
            "elem_b",
        )
    )
    return hashlib.sha256(canon.encode()).hexdigest()[:16]
