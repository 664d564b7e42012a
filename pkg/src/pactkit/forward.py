"""Analytic forward simulation of spherical sources.

Point-like transducers record the closed-form N-wave of a uniform sphere:

    p(t) = A (d - c0 t) / (2 d)   for |d - c0 t| <= a_s, else 0,

with d the distance from the transducer to the sphere center. Finite
rectangular transducers are modeled in the frequency domain: the N-wave
spectrum of each sphere is multiplied by the far-field spatial impulse
response of the element evaluated at the sphere center,

    H(f) = sinc(a x pi f / (c0 |r|)) * sinc(b y pi f / (c0 |r|)),

where (x, y) are the source coordinates in the element's local frame,
|r| the source distance, and sinc(u) = sin(u)/u.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.fft as sfft

from .geometry import SystemConfig, TransducerPose, config_hash, pose_arrays

__all__ = [
    "Sphere",
    "PressureTensor",
    "FrequencyGrid",
    "fft_length",
    "frequency_grid",
    "sphere_trace_point",
    "sir_spectrum",
    "sir_spectrum_batch",
    "simulate",
    "noise_scale",
    "add_noise",
]


@dataclass(frozen=True)
class Sphere:
    """Uniform spherical source: center (mm), radius (mm), amplitude (AU)."""

    center: tuple[float, float, float]
    radius: float
    amplitude: float

    def __post_init__(self) -> None:
        if self.radius <= 0:
            raise ValueError("sphere radius must be positive")
        if self.amplitude < 0:
            raise ValueError("sphere amplitude must be nonnegative")
        object.__setattr__(self, "center", tuple(float(v) for v in self.center))


@dataclass
class PressureTensor:
    """Measurement data of shape (n_elements, n_views, n_samples)."""

    data: np.ndarray
    config_hash: str

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError("pressure tensor must be 3-dimensional")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("pressure tensor contains non-finite values")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True)
class FrequencyGrid:
    """Real-signal spectrum bins of the zero-padded transform.

    n_bins = n_fft/2 + 1 and df = 1/(n_fft * dt) for padded length n_fft.
    """

    n_bins: int
    df: float

    def __post_init__(self) -> None:
        if int(self.n_bins) < 1:
            raise ValueError("need at least one frequency bin")
        if self.df <= 0:
            raise ValueError("bin spacing must be positive")

    @property
    def freqs(self) -> np.ndarray:
        """Bin frequencies in MHz."""
        return np.arange(self.n_bins) * self.df


def fft_length(n_samples: int) -> int:
    """Padded transform length: the fastest FFT size >= 2 * n_samples.

    At least doubling the axis keeps the circular convolution of the sinc
    filter's (non-compact) impulse response from wrapping into the trace.
    """
    return sfft.next_fast_len(2 * int(n_samples))


def frequency_grid(config: SystemConfig) -> FrequencyGrid:
    n_fft = fft_length(config.n_samples)
    return FrequencyGrid(n_bins=n_fft // 2 + 1, df=1.0 / (n_fft * config.dt))


def _nwave(dist, radius: float, amplitude: float, times, sos: float) -> np.ndarray:
    """N-wave traces for an array of observation distances.

    dist has any shape S; times has shape (n,); result has shape S + (n,).
    """
    d = np.asarray(dist, dtype=float)[..., None]
    ct = sos * np.asarray(times, dtype=float)
    inside = np.abs(d - ct) <= radius
    return np.where(inside, amplitude * (d - ct) / (2.0 * d), 0.0)


def sphere_trace_point(s: Sphere, pose: TransducerPose, config: SystemConfig) -> np.ndarray:
    """Point-transducer trace of one sphere, sampled at t = r*dt.

    Raises ValueError if the transducer sits inside the sphere.
    """
    d = float(np.linalg.norm(np.asarray(s.center) - pose.center))
    if d <= s.radius:
        raise ValueError("observation point lies inside the sphere")
    return _nwave(np.array([d]), s.radius, s.amplitude, config.times, config.sos)[0]


def sir_spectrum(local, config: SystemConfig, freqs: FrequencyGrid) -> np.ndarray:
    """Far-field SIR spectrum of the rectangular element for one source point.

    local is the source position in the element frame (mm). The result is
    real, 1 at f = 0, and bounded by 1 in magnitude everywhere.
    """
    local = np.asarray(local, dtype=float)
    if np.linalg.norm(local) == 0.0:
        raise ValueError("source position coincides with the element center")
    return sir_spectrum_batch(local[None, :], config, freqs)[0]


def sir_spectrum_batch(locals_, config: SystemConfig, freqs: FrequencyGrid) -> np.ndarray:
    """Vectorized sir_spectrum: (n, 3) local positions -> (n, n_bins)."""
    loc = np.asarray(locals_, dtype=float)
    norm = np.linalg.norm(loc, axis=-1, keepdims=True)
    f = freqs.freqs[None, :]
    # np.sinc(x) = sin(pi x)/(pi x); divide the argument by pi to get sin(u)/u.
    ux = config.elem_a * loc[..., 0:1] * f / (config.sos * norm)
    uy = config.elem_b * loc[..., 1:2] * f / (config.sos * norm)
    return np.sinc(ux) * np.sinc(uy)


def _support_slice(d_min: float, d_max: float, radius: float, config: SystemConfig, n_axis: int) -> slice:
    """Sample index window that contains every N-wave in a distance range."""
    lo = int(np.floor((d_min - radius) / (config.sos * config.dt))) - 1
    hi = int(np.ceil((d_max + radius) / (config.sos * config.dt))) + 2
    return slice(max(lo, 0), min(hi, n_axis))


def _view_chunks(config: SystemConfig, n_axis: int, budget_bytes: float = 1.28e8):
    per_view = config.n_elements * n_axis * 8.0
    step = max(1, int(budget_bytes / per_view))
    for v0 in range(0, config.n_views, step):
        yield v0, min(v0 + step, config.n_views)


def simulate(spheres, config: SystemConfig, mode: str = "point") -> PressureTensor:
    """Simulate the full measurement tensor for a list of spheres.

    mode "point" samples the ideal N-wave at every transducer position;
    mode "rect" applies the far-field element SIR to each sphere's N-wave
    on a zero-padded time axis before summing. Output is float64 of shape
    (n_elements, n_views, n_samples); wholly linear in the sphere list.
    """
    if mode not in ("point", "rect"):
        raise ValueError(f"unknown simulation mode: {mode!r}")
    centers, ax_x, ax_y, ax_z = pose_arrays(config)
    spheres = list(spheres)

    for s in spheres:
        d_all = np.linalg.norm(centers - np.asarray(s.center), axis=-1)
        if np.any(d_all <= s.radius):
            raise ValueError("a transducer lies inside a source sphere")

    nr, nv, nt = config.n_elements, config.n_views, config.n_samples
    out = np.zeros((nr, nv, nt))
    if not spheres:
        return PressureTensor(out, config_hash(config))

    if mode == "point":
        for v0, v1 in _view_chunks(config, nt):
            c_chunk = centers[:, v0:v1]
            for s in spheres:
                d = np.linalg.norm(c_chunk - np.asarray(s.center), axis=-1)
                win = _support_slice(d.min(), d.max(), s.radius, config, nt)
                if win.start >= win.stop:
                    continue
                t = config.times[win]
                out[:, v0:v1, win] += _nwave(d, s.radius, s.amplitude, t, config.sos)
        return PressureTensor(out, config_hash(config))

    n_fft = fft_length(nt)
    grid = frequency_grid(config)
    for v0, v1 in _view_chunks(config, n_fft):
        c_chunk = centers[:, v0:v1]
        spec = np.zeros((nr, v1 - v0, grid.n_bins), dtype=complex)
        padded = np.zeros((nr, v1 - v0, n_fft))
        for s in spheres:
            delta = np.asarray(s.center) - c_chunk
            d = np.linalg.norm(delta, axis=-1)
            padded[:] = 0.0
            win = _support_slice(d.min(), d.max(), s.radius, config, nt)
            if win.start >= win.stop:
                continue
            padded[..., win] = _nwave(d, s.radius, s.amplitude, config.times[win], config.sos)
            loc3 = np.stack(
                [
                    np.einsum("rvk,rvk->rv", delta, ax_x[:, v0:v1]),
                    np.einsum("rvk,rvk->rv", delta, ax_y[:, v0:v1]),
                    np.einsum("rvk,rvk->rv", delta, ax_z[:, v0:v1]),
                ],
                axis=-1,
            )
            h = sir_spectrum_batch(loc3.reshape(-1, 3), config, grid)
            spec += sfft.rfft(padded, axis=-1) * h.reshape(nr, v1 - v0, grid.n_bins)
        out[:, v0:v1] = sfft.irfft(spec, n=n_fft, axis=-1)[..., :nt]
    return PressureTensor(out, config_hash(config))


def noise_scale(p: PressureTensor, fraction: float) -> float:
    """Noise sigma as a fraction of the 90th percentile of |data|."""
    data = p.data
    if not np.any(data):
        raise ValueError("noise scale of an all-zero tensor is undefined")
    return float(fraction) * float(np.percentile(np.abs(data), 90.0))


def add_noise(p: PressureTensor, sigma: float, seed: int) -> PressureTensor:
    """Add i.i.d. zero-mean Gaussian noise with a per-trace substream RNG.

    The stream of trace (i_r, i_v) is seeded by (seed, i_r, i_v), so the
    result does not depend on evaluation order or thread count.
    """
    if sigma < 0:
        raise ValueError("noise sigma must be nonnegative")
    if sigma == 0:
        return PressureTensor(p.data.copy(), p.config_hash)
    nr, nv, nt = p.data.shape
    noisy = p.data.copy()
    for i_r in range(nr):
        for i_v in range(nv):
            rng = np.random.default_rng([seed, i_r, i_v])
            noisy[i_r, i_v] += rng.normal(0.0, sigma, nt)
    return PressureTensor(noisy, p.config_hash)
