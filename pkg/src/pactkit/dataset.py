"""Stochastic-spheres dataset generation and the deterministic study object.

Objects are collections of uniform spheres with log-normally distributed
radii (truncated by rejection), centers uniform in the lower hemisphere of
the imaging support, and uniform amplitudes. Each dataset sample pairs a
noisy finite-transducer simulation (input) with a noiseless point-like
simulation (target).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .forward import PressureTensor, Sphere, add_noise, noise_scale, simulate
from .geometry import SystemConfig, config_hash
from .tensorio import Manifest, ManifestRecord, read_tensor, write_manifest, write_tensor

__all__ = [
    "SphereDistribution",
    "SamplePair",
    "lognormal_params",
    "sample_object",
    "generate_dataset",
    "deterministic_spheres",
    "load_sample",
    "read_spheres",
    "write_spheres",
    "split_counts",
]

DETERMINISTIC_VARIANTS = ("baseline", "high_noise", "low_sos", "high_sos")
BASE_NOISE_FRACTION = 0.0267


@dataclass(frozen=True)
class SphereDistribution:
    """Sampling law for stochastic sphere objects.

    radius_lognormal_mean/std are the mean and standard deviation of the
    log-normal radius variate itself (not of its logarithm); radii outside
    [radius_min, radius_max] are rejected and redrawn.
    """

    n_spheres: int = 200
    radius_lognormal_mean: float = 0.375
    radius_lognormal_std: float = 1.0
    radius_min: float = 0.125
    radius_max: float = 5.0
    position_region: float = 60.0
    amplitude_min: float = 0.0
    amplitude_max: float = 0.02

    def __post_init__(self) -> None:
        if not (0 < self.radius_min < self.radius_max):
            raise ValueError("need 0 < radius_min < radius_max")
        if self.amplitude_min > self.amplitude_max:
            raise ValueError("amplitude_min must not exceed amplitude_max")
        if self.n_spheres < 1 or self.position_region <= 0:
            raise ValueError("n_spheres and position_region must be positive")


@dataclass
class SamplePair:
    id: str
    input: PressureTensor
    target: PressureTensor
    spheres: list[Sphere]


def lognormal_params(mean: float, std: float) -> tuple[float, float]:
    """Underlying normal (mu, sigma) for a log-normal with given variate mean/std."""
    mu = math.log(mean * mean / math.sqrt(mean * mean + std * std))
    sigma = math.sqrt(math.log(1.0 + (std * std) / (mean * mean)))
    return mu, sigma


def _rim_z(config: SystemConfig) -> float:
    """z of the aperture rim plane; sphere centers must stay below it."""
    return config.aperture_radius * math.cos(math.radians(config.polar_start))


def sample_object(dist: SphereDistribution, seed, config: SystemConfig | None = None) -> list[Sphere]:
    """Draw one random sphere object.

    Centers are uniform in the lower half-ball of radius position_region,
    additionally kept below the aperture rim plane so every center lies
    inside the convex hull of the measurement surface.
    """
    rng = np.random.default_rng(seed)
    mu, sigma = lognormal_params(dist.radius_lognormal_mean, dist.radius_lognormal_std)

    lo, hi = dist.radius_min, dist.radius_max
    # Rejection acceptance probability of the truncation window.
    def phi(x: float) -> float:
        return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))

    accept = phi((math.log(hi) - mu) / sigma) - phi((math.log(lo) - mu) / sigma)
    if accept <= 1e-12:
        raise ValueError("radius truncation bounds have zero acceptance probability")

    radii = np.empty(0)
    while radii.size < dist.n_spheres:
        draw = rng.lognormal(mu, sigma, max(dist.n_spheres, 64))
        radii = np.concatenate([radii, draw[(draw >= lo) & (draw <= hi)]])
    radii = radii[: dist.n_spheres]

    z_cap = min(0.0, _rim_z(config or SystemConfig()))
    centers = np.empty((0, 3))
    while centers.shape[0] < dist.n_spheres:
        cand = rng.uniform(-1.0, 1.0, (2 * dist.n_spheres, 3)) * dist.position_region
        keep = (np.linalg.norm(cand, axis=1) < dist.position_region) & (cand[:, 2] < z_cap)
        centers = np.concatenate([centers, cand[keep]])
    centers = centers[: dist.n_spheres]

    amps = rng.uniform(dist.amplitude_min, dist.amplitude_max, dist.n_spheres)
    return [
        Sphere(center=tuple(centers[i]), radius=float(radii[i]), amplitude=float(amps[i]))
        for i in range(dist.n_spheres)
    ]


def split_counts(n: int) -> tuple[int, int, int]:
    """70/10/20 split sizes (train, val, test); test absorbs the remainder."""
    n_train = int(math.floor(0.7 * n))
    n_val = int(math.floor(0.1 * n))
    return n_train, n_val, n - n_train - n_val


def generate_dataset(
    n: int,
    config: SystemConfig,
    dist: SphereDistribution,
    noise_fraction: float,
    seed: int,
    out,
) -> Manifest:
    """Generate n sample pairs and write tensors, provenance, and manifest.

    Per-sample RNG streams are derived from (seed, index) so the output is
    independent of generation order. Inputs are rect-mode simulations with
    Gaussian noise scaled to noise_fraction of the 90th percentile of the
    clean amplitude; targets are noiseless point-mode simulations.
    """
    if n < 1:
        raise ValueError("dataset size must be >= 1")
    out = Path(out)
    (out / "tensors").mkdir(parents=True, exist_ok=True)
    (out / "spheres").mkdir(parents=True, exist_ok=True)

    n_train, n_val, _ = split_counts(n)
    splits = ["train"] * n_train + ["val"] * n_val + ["test"] * (n - n_train - n_val)

    records = []
    chash = config_hash(config)
    for i in range(n):
        sid = f"s{i:04d}"
        spheres = sample_object(dist, [seed, i], config)
        rect = simulate(spheres, config, "rect")
        point = simulate(spheres, config, "point")
        sigma = 0.0
        if noise_fraction > 0 and np.any(rect.data):
            sigma = noise_scale(rect, noise_fraction)
            noise_seed = int(np.random.default_rng([seed, i, 1]).integers(2**63))
            rect = add_noise(rect, sigma, noise_seed)
        rect_rel = f"tensors/{sid}_rect.tns"
        point_rel = f"tensors/{sid}_point.tns"
        meta = {"config_hash": chash, "id": sid, "noise_sigma": sigma}
        write_tensor(out / rect_rel, rect.data, {**meta, "kind": "rect"})
        write_tensor(out / point_rel, point.data, {**meta, "kind": "point"})
        write_spheres(out / "spheres" / f"{sid}.tsv", spheres)
        records.append(ManifestRecord(sid, splits[i], rect_rel, point_rel))

    header = {"seed": str(seed), "n": str(n), "noise_fraction": repr(noise_fraction)}
    header.update({f"system.{k}": repr(v) for k, v in asdict(config).items()})
    header.update({f"dataset.{k}": repr(v) for k, v in asdict(dist).items()})
    manifest = Manifest(root=out, records=records, header=header)
    write_manifest(manifest, out / "manifest.tsv")
    return manifest


def deterministic_spheres(
    variant: str = "baseline", base: SystemConfig | None = None
) -> tuple[list[Sphere], SystemConfig, float]:
    """Six identical resolution-study spheres and the per-variant system.

    Spheres of radius 1.2 mm and unit amplitude sit at (10n-5, 0, -2) mm.
    Variants change only the noise level or the speed of sound.
    """
    if variant not in DETERMINISTIC_VARIANTS:
        raise ValueError(f"unknown variant: {variant!r}")
    base = base or SystemConfig()
    spheres = [
        Sphere(center=(10.0 * n - 5.0, 0.0, -2.0), radius=1.2, amplitude=1.0)
        for n in range(1, 7)
    ]
    sos = {"low_sos": 1.447, "high_sos": 1.555}.get(variant, base.sos)
    noise = BASE_NOISE_FRACTION * (10.0 if variant == "high_noise" else 1.0)
    fields = asdict(base)
    fields["sos"] = sos
    return spheres, SystemConfig(**fields), noise


def write_spheres(path, spheres) -> None:
    lines = ["# x_mm\ty_mm\tz_mm\tradius_mm\tamplitude"]
    for s in spheres:
        lines.append(
            "\t".join(repr(float(v)) for v in (*s.center, s.radius, s.amplitude))
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_spheres(path) -> list[Sphere]:
    spheres = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        vals = [float(v) for v in line.split("\t")]
        if len(vals) != 5:
            raise ValueError(f"malformed sphere line: {line!r}")
        spheres.append(Sphere(center=tuple(vals[:3]), radius=vals[3], amplitude=vals[4]))
    return spheres


def load_sample(manifest: Manifest, sample_id: str) -> SamplePair:
    """Load one sample pair (and provenance spheres when present)."""
    rec = manifest.record(sample_id)
    inp, meta_in = read_tensor(manifest.root / rec.input_path)
    tgt, meta_tg = read_tensor(manifest.root / rec.target_path)
    chash = (meta_in or {}).get("config_hash", "")
    spheres_file = manifest.root / "spheres" / f"{sample_id}.tsv"
    spheres = read_spheres(spheres_file) if spheres_file.exists() else []
    return SamplePair(
        id=sample_id,
        input=PressureTensor(np.asarray(inp, dtype=float), chash),
        target=PressureTensor(np.asarray(tgt, dtype=float), (meta_tg or {}).get("config_hash", chash)),
        spheres=spheres,
    )
