"""Command-line pipeline tying simulation, training, and evaluation together.

Every command takes --config (run configuration file), --seed, --out, and
--threads. Outputs are binary tensor files plus TSV tables; study commands
also render figures. On any error the command removes the files it created
and exits nonzero.
"""

from __future__ import annotations

import argparse
import logging
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import compensation, dataset, metrics, plots, recon, tensorio
from .forward import PressureTensor, add_noise, noise_scale, simulate
from .geometry import VoxelGrid
from .recon import Volume
from .runconfig import RunConfig, default_runconfig, load_runconfig

log = logging.getLogger("pactkit")

__all__ = ["main"]


class _Outputs:
    """Tracks files/directories a command creates so failures can undo them."""

    def __init__(self) -> None:
        self._files: list[Path] = []
        self._dirs: list[Path] = []

    def dir(self, path) -> Path:
        path = Path(path)
        missing = []
        probe = path
        while not probe.exists() and probe != probe.parent:
            missing.append(probe)
            probe = probe.parent
        path.mkdir(parents=True, exist_ok=True)
        self._dirs.extend(missing)
        return path

    def file(self, path) -> Path:
        path = Path(path)
        self._files.append(path)
        return path

    def discard(self) -> None:
        for f in self._files:
            f.unlink(missing_ok=True)
        for d in reversed(self._dirs):
            shutil.rmtree(d, ignore_errors=True)


def _rc(args) -> RunConfig:
    if getattr(args, "config", None):
        return load_runconfig(args.config)
    return default_runconfig()


def _fmt(value) -> str:
    if isinstance(value, float):
        return format(value, ".9g")
    return str(value)


def _write_tsv(path, columns, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(columns) + "\n")
        for row in rows:
            fh.write("\t".join(_fmt(v) for v in row) + "\n")


def _read_pressure(path) -> PressureTensor:
    arr, meta = tensorio.read_tensor(path)
    return PressureTensor(np.asarray(arr, dtype=np.float64), (meta or {}).get("config_hash", ""))


def _write_pressure(path, p: PressureTensor, kind: str) -> None:
    tensorio.write_tensor(
        path, p.data.astype(np.float32), {"kind": kind, "config_hash": p.config_hash}
    )


def _write_volume(path, vol: Volume) -> None:
    tensorio.write_tensor(
        path,
        vol.data.astype(np.float32),
        {"kind": "volume", "origin": list(vol.grid.origin), "spacing": vol.grid.spacing},
    )


def _read_volume(path) -> Volume:
    arr, meta = tensorio.read_tensor(path)
    if not meta or meta.get("kind") != "volume":
        raise ValueError(f"{path} is not a volume file")
    grid = VoxelGrid(tuple(meta["origin"]), float(meta["spacing"]), arr.shape)
    return Volume(grid, np.asarray(arr, dtype=np.float64))


def cmd_gen_data(args, out: _Outputs) -> None:
    rc = _rc(args)
    target = Path(args.out)
    if target.exists():
        if (target / "manifest.tsv").exists():
            shutil.rmtree(target)
        elif any(target.iterdir()):
            raise ValueError(f"{target} exists and is not a dataset directory")
    out.dir(target)
    dataset.generate_dataset(
        rc.n_samples, rc.system, rc.dist, rc.noise_fraction, args.seed, target
    )
    log.info("wrote %d sample pairs to %s", rc.n_samples, target)


def cmd_simulate(args, out: _Outputs) -> None:
    rc = _rc(args)
    spheres = dataset.read_spheres(args.spheres)
    target = out.dir(args.out)
    rect = simulate(spheres, rc.system, "rect")
    if args.noise_fraction > 0 and np.any(rect.data):
        rect = add_noise(rect, noise_scale(rect, args.noise_fraction), args.seed)
    point = simulate(spheres, rc.system, "point")
    _write_pressure(out.file(target / "rect.tns"), rect, "rect")
    _write_pressure(out.file(target / "point.tns"), point, "point")
    log.info("simulated %d spheres -> %s", len(spheres), target)


def cmd_train(args, out: _Outputs) -> None:
    rc = _rc(args)
    manifest = tensorio.read_manifest(args.data)
    from .geometry import config_hash as _hash

    data_hash = None
    first = manifest.records[0] if manifest.records else None
    if first is not None:
        _, meta = tensorio.read_tensor(manifest.input_file(first.id), mmap=True)
        data_hash = (meta or {}).get("config_hash")
    if data_hash is not None and data_hash != _hash(rc.system):
        log.warning("dataset configuration differs from the run configuration")

    from .compensation import SynthesisNetSpec, init_model, save_checkpoint, train

    model = init_model(
        rc.k, rc.patch, args.seed, config=rc.system,
        net_spec=SynthesisNetSpec(widths=rc.widths), lam_init=rc.lam_init,
    )
    hp = replace(rc.hp, seed=args.seed)
    target = out.dir(args.out)
    model, history = train(model, manifest, hp)
    save_checkpoint(model, out.file(target / "checkpoint.tns"))
    _write_tsv(
        out.file(target / "history.tsv"),
        ["epoch", "train_mae", "val_mae", "lr"],
        [[h["epoch"], h["train_mae"], h["val_mae"], h["lr"]] for h in history],
    )
    log.info("trained %d epochs, best val MAE %.3e", len(history),
             min(h["val_mae"] for h in history))


def cmd_compensate(args, out: _Outputs) -> None:
    model = compensation.load_checkpoint(args.checkpoint)
    p = _read_pressure(args.input)
    target = out.dir(args.out)
    result = compensation.infer_full(model, p)
    _write_pressure(out.file(target / "compensated.tns"), result, "compensated")
    log.info("compensated %s -> %s", args.input, target / "compensated.tns")


def cmd_reconstruct(args, out: _Outputs) -> None:
    rc = _rc(args)
    p = _read_pressure(args.input)
    fwhm = args.presmooth_fwhm if args.presmooth_fwhm is not None else rc.presmooth_fwhm
    if fwhm > 0:
        p = recon.presmooth(p, fwhm, rc.system)
    vol = recon.ubp(p, None, rc.system, rc.grid)
    target = out.dir(args.out)
    _write_volume(out.file(target / "volume.tns"), vol)
    log.info("reconstructed %s -> %s", args.input, target / "volume.tns")


def cmd_evaluate(args, out: _Outputs) -> None:
    rc = _rc(args)
    if len(args.volume) != len(args.method):
        raise ValueError("need one --method label per --volume")
    ref = _read_volume(args.reference)
    ref_vessel = metrics.frangi(ref.data, rc.frangi_sigmas)
    ref_map = ref_vessel >= metrics.triangle_threshold(ref_vessel)
    target = out.dir(args.out)

    rows = []
    plot_rows = []
    for vol_path, method in zip(args.volume, args.method):
        vol = _read_volume(vol_path)
        if vol.grid != ref.grid:
            raise ValueError(f"{vol_path} grid differs from the reference grid")
        vessel = metrics.frangi(vol.data, rc.frangi_sigmas)
        vol_map = vessel >= metrics.triangle_threshold(vessel)
        for inner, outer in rc.shells:
            sm = metrics.shell_mask(ref.grid, rc.system, inner, outer)
            shell_name = f"{inner:g}-{outer:g}"
            r = metrics.rse(vol.data, ref.data, sm)
            c = metrics.ncc(vol.data, ref.data, sm)
            d = metrics.dice(vol_map & sm.mask, ref_map & sm.mask)
            rows.append([args.sample, shell_name, method, r, c, d])
            plot_rows.append({"shell": shell_name, "method": method, "rse": r, "ncc": c})
    _write_tsv(out.file(target / "metrics.tsv"),
               ["sample", "shell", "method", "rse", "ncc", "dice"], rows)
    plots.plot_shell_metrics(plot_rows, out.file(target / "metrics.png"))
    log.info("evaluated %d volumes -> %s", len(args.volume), target / "metrics.tsv")


def _study_profile(p: PressureTensor, config, x_mm: float, reach: float = 8.0,
                   step: float = 0.05):
    ys = np.arange(-reach, reach + 0.5 * step, step)
    pts = np.column_stack([np.full_like(ys, x_mm), ys, np.full_like(ys, -2.0)])
    return ys, recon.ubp_points(p, None, config, pts)


def cmd_resolution_study(args, out: _Outputs) -> None:
    rc = _rc(args)
    fwhm = args.presmooth_fwhm if args.presmooth_fwhm is not None else 0.5
    model = compensation.load_checkpoint(args.checkpoint) if args.checkpoint else None
    target = out.dir(args.out)

    fit_rows = []
    profile_rows = []
    for variant in dataset.DETERMINISTIC_VARIANTS:
        spheres, cfg, noise_fraction = dataset.deterministic_spheres(variant, base=rc.system)
        rect = simulate(spheres, cfg, "rect")
        rect = add_noise(rect, noise_scale(rect, noise_fraction), args.seed)
        point = simulate(spheres, cfg, "point")

        tensors = {"rect": rect, "point": point}
        if model is not None:
            tensors["compensated"] = compensation.infer_full(model, rect)
        smooth = {name: recon.presmooth(p, fwhm, cfg) if fwhm > 0 else p
                  for name, p in tensors.items()}

        for sphere in spheres:
            x_mm = sphere.center[0]
            per_sphere = dict(smooth)
            # The single-center filter is exact only for an isolated source,
            # so the oracle row deconvolves a simulation of this sphere alone.
            alone = simulate([sphere], cfg, "rect")
            alone = add_noise(alone, noise_scale(alone, noise_fraction), args.seed)
            oracle = compensation.oracle_deconvolve(alone, sphere.center, cfg)
            per_sphere["oracle-kernel"] = (
                recon.presmooth(oracle, fwhm, cfg) if fwhm > 0 else oracle
            )

            # The rect half-width is calibrated on the point reference and
            # held fixed for the other rows, so sigma measures the blur even
            # where the smear is wider than the sphere.
            ref_ys, ref_prof = _study_profile(per_sphere["point"], cfg, x_mm)
            ref_fit = metrics.fit_fwhm(ref_ys, ref_prof)
            for method, tensor in per_sphere.items():
                if method == "point":
                    ys, prof, fit = ref_ys, ref_prof, ref_fit
                else:
                    ys, prof = _study_profile(tensor, cfg, x_mm)
                    fit = metrics.fit_fwhm(
                        ys, prof, fixed_half_width=ref_fit.half_width
                    )
                fit_rows.append([variant, x_mm, method, fit.fwhm, fit.blur_fwhm,
                                 fit.sigma, fit.half_width, fit.residual])
                for y_mm, value in zip(ys, prof):
                    profile_rows.append([variant, method, x_mm, y_mm, value])
        log.info("resolution study: finished variant %s", variant)

    _write_tsv(out.file(target / "fwhm.tsv"),
               ["variant", "x_mm", "method", "fwhm_mm", "blur_fwhm_mm",
                "sigma_mm", "half_width_mm", "residual"], fit_rows)
    _write_tsv(out.file(target / "profiles.tsv"),
               ["variant", "method", "x_mm", "y_mm", "value"], profile_rows)

    for variant in dataset.DETERMINISTIC_VARIANTS:
        rows = [
            {"method": r[2], "x_mm": r[1], "blur_fwhm": r[4]}
            for r in fit_rows
            if r[0] == variant
        ]
        plots.plot_fwhm_vs_x(rows, out.file(target / f"fwhm_{variant}.png"),
                             title=f"variant: {variant}")
    base_profiles = [
        {"method": r[1], "x_mm": r[2], "y_mm": r[3], "value": r[4]}
        for r in profile_rows
        if r[0] == "baseline"
    ]
    plots.plot_profiles(base_profiles, out.file(target / "profiles_baseline.png"),
                        title="baseline y-profiles")
    log.info("resolution study written to %s", target)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pactkit",
        description="Simulation, compensation, and reconstruction pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="run configuration file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--threads", type=int, default=1)

    p = sub.add_parser("gen-data", help="generate a stochastic training dataset")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("simulate", help="simulate point/rect tensors for a sphere list")
    common(p)
    p.add_argument("--spheres", required=True, help="sphere table (TSV)")
    p.add_argument("--noise-fraction", type=float, default=0.0)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train the compensation model")
    common(p)
    p.add_argument("--data", required=True, help="dataset manifest.tsv")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compensate", help="run a checkpoint over a measurement tensor")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="measurement tensor file")
    p.set_defaults(func=cmd_compensate)

    p = sub.add_parser("reconstruct", help="backproject a measurement tensor")
    common(p)
    p.add_argument("--input", required=True, help="measurement tensor file")
    p.add_argument("--presmooth-fwhm", type=float, default=None,
                   help="temporal Gaussian pre-smoothing, spatial FWHM in mm")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("evaluate", help="shell metrics of volumes against a reference")
    common(p)
    p.add_argument("--reference", required=True, help="reference volume file")
    p.add_argument("--volume", action="append", required=True)
    p.add_argument("--method", action="append", required=True,
                   help="label for the matching --volume")
    p.add_argument("--sample", default="s0000")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("resolution-study",
                       help="deterministic-sphere study across all variants")
    common(p)
    p.add_argument("--checkpoint", help="optional trained model to include")
    p.add_argument("--presmooth-fwhm", type=float, default=None)
    p.set_defaults(func=cmd_resolution_study)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(max(1, args.threads))
    outputs = _Outputs()
    try:
        args.func(args, outputs)
    except Exception as exc:
        outputs.discard()
        log.error("%s: %s", args.command, exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
