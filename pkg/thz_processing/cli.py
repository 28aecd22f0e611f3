"""
THz Reconstruction - Command Line
Subcommands: synth, fit-tra, train, infer, hybrid, eval, export, check-env

Configuration precedence: command-line flag > config file (.env) > defaults.
"""

import argparse
import json
import logging
import platform
import sys
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .config import Settings, load_settings
from .data import (
    NoiseSpec,
    ParamRanges,
    RegionMask,
    THzVolume,
    atomic_path,
    export_param_maps,
    load_mask,
    load_param_map,
    load_volume,
    material_layout,
    raw_intensity,
    sample_truth,
    save_grid_csv,
    save_mask,
    save_param_map,
    save_volume,
    step_layout,
    synthesize_volume,
)
from .encoder import EncoderArchitecture, TrainConfig, infer_volume, load_weights, train
from .errors import ThzError
from .evaluate import (
    MethodResult,
    compare_methods,
    line_profile_frame,
    param_errors,
    per_pixel_losses,
    save_profile_csv,
)
from .model import AcquisitionConfig
from .tra import default_fit_options, fit_volume

logger = logging.getLogger(__name__)

RULE = "=" * 70


# ---------------------------------------------------------------------------
# Run manifest
# ---------------------------------------------------------------------------


@dataclass
class RunManifest:
    """Everything needed to reproduce one command's outputs"""

    command: str
    config: Dict
    seeds: Dict[str, int] = field(default_factory=dict)
    inputs: Dict[str, str] = field(default_factory=dict)
    outputs: Dict[str, str] = field(default_factory=dict)
    wall_times: Dict[str, float] = field(default_factory=dict)
    extra: Dict = field(default_factory=dict)
    tool_version: str = __version__
    created: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())

    def record(self, key: str, path: Path) -> Path:
        self.outputs[key] = str(path)
        return path

    def write(self, path) -> Path:
        path = Path(path)
        payload = {
            "command": self.command,
            "config": self.config,
            "seeds": self.seeds,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "wall_times": self.wall_times,
            "extra": self.extra,
            "tool_version": self.tool_version,
            "python": platform.python_version(),
            "created": self.created,
        }
        with atomic_path(path) as tmp:
            tmp.write_text(json.dumps(payload, indent=2, default=str), encoding="utf-8")
        return path

    def cleanup(self):
        """Remove outputs of a failed run"""
        for written in self.outputs.values():
            Path(written).unlink(missing_ok=True)


def read_manifest(directory: Path) -> Dict:
    path = Path(directory) / "manifest.json"
    if not path.exists():
        return {}
    return json.loads(path.read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def resolve(value, settings: Settings, key: str):
    """Flag value when given, else the configured setting"""
    return value if value is not None else getattr(settings, key)


def banner(title: str, subtitle: Optional[str] = None):
    print(RULE)
    print(title)
    if subtitle:
        print(subtitle)
    print(RULE)


def _ranges_arg(text: str) -> ParamRanges:
    try:
        return ParamRanges.parse(text)
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e)) from None


def _named_path(text: str):
    name, sep, path = text.partition("=")
    if not sep or not name or not path:
        raise argparse.ArgumentTypeError(f"expected NAME=PATH, got {text!r}")
    return name, Path(path)


def _write_map_outputs(manifest: RunManifest, out: Path, pm, volume) -> np.ndarray:
    losses = per_pixel_losses(pm, volume)
    manifest.record("params", save_param_map(pm, out / "params.npy"))
    manifest.record("loss", save_grid_csv(losses, out / "loss.csv"))
    return losses


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth(args, settings: Settings, manifest: RunManifest) -> int:
    banner("Synthesize THz Volume", f"{args.nx} x {args.ny} x {resolve(args.nz, settings, 'nz')} samples")
    nz = resolve(args.nz, settings, "nz")
    seed = resolve(args.seed, settings, "seed")
    noise_sigma = resolve(args.noise_sigma, settings, "noise_sigma")
    cfg = AcquisitionConfig.default(n_z=nz, omega=resolve(args.omega, settings, "omega"))
    out = Path(args.out)

    masks: Dict[str, RegionMask] = {}
    if args.layout == "materials":
        truth, masks = material_layout(args.nx, args.ny, cfg, seed=seed)
    elif args.layout == "steps":
        truth, masks = step_layout(args.nx, args.ny, cfg, n_steps=min(5, args.nx), seed=seed)
    else:
        ranges = args.ranges or ParamRanges(mu=(min(10.0, cfg.midpoint), max(cfg.extent[1] - 10.0, cfg.midpoint)))
        ranges.check_grid(cfg)
        truth = sample_truth(seed, ranges, args.nx, args.ny)
        manifest.config["ranges"] = ranges.to_dict()

    volume = synthesize_volume(truth, cfg, NoiseSpec(sigma_noise=noise_sigma, seed=seed))
    if args.precision == "float32":
        volume = THzVolume(volume.data.astype(np.float32), cfg, volume.provenance)

    manifest.seeds["synthesis"] = seed
    manifest.record("volume", save_volume(volume, out / "volume.thzv"))
    manifest.record("truth", save_param_map(truth, out / "truth.npy"))
    for name, mask in masks.items():
        manifest.record(f"mask_{name}", save_mask(mask, out / "masks" / f"{name}.csv"))
    manifest.extra["checksum"] = volume.checksum()

    print(f"  ✓ Volume written: {out / 'volume.thzv'}")
    print(f"  ✓ Checksum: {volume.checksum()}")
    return 0


def _fit_options(args, settings: Settings, cfg: AcquisitionConfig):
    return default_fit_options(
        cfg,
        max_iters=resolve(args.max_iters, settings, "max_iters"),
        gradient_tol=resolve(args.tol, settings, "gradient_tol"),
        step_tol=resolve(args.step_tol, settings, "step_tol"),
    )


def cmd_fit_tra(args, settings: Settings, manifest: RunManifest) -> int:
    banner("Trust-Region Fit", f"Volume: {args.volume}")
    volume = load_volume(args.volume)
    opts = _fit_options(args, settings, volume.cfg)
    threads = resolve(args.threads, settings, "threads")
    out = Path(args.out)

    if args.init == "map":
        init_source = load_param_map(args.init_map)
        manifest.inputs["init_map"] = str(args.init_map)
    else:
        init_source = "heuristic"

    print(f"  Fitting {volume.n_pixels} pixels with {threads} worker(s)...")
    pm, reports = fit_volume(volume, opts, init_source, workers=threads)

    _write_map_outputs(manifest, out, pm, volume)
    summary = reports.summary()
    manifest.record("fit_summary", save_profile_csv(summary, out / "fit_summary.csv"))
    manifest.wall_times["compute"] = reports.total_wall_time
    manifest.extra["mean_iterations"] = float(reports.iterations.mean())
    manifest.extra["workers"] = threads

    print(f"\n  ✓ Mean final loss: {reports.final_loss.mean():.6g}")
    print(f"  ✓ Mean iterations: {reports.iterations.mean():.1f}")
    print(f"  ✓ Wall time: {reports.total_wall_time:.2f}s")
    return 0


def cmd_train(args, settings: Settings, manifest: RunManifest) -> int:
    banner("Train Model-Based Encoder", f"Volume: {args.volume}")
    volume = load_volume(args.volume)
    tc = TrainConfig(
        epochs=resolve(args.epochs, settings, "epochs"),
        batch_size=resolve(args.batch_size, settings, "batch_size"),
        lr=resolve(args.lr, settings, "lr"),
        lr_decay_factor=resolve(args.decay, settings, "lr_decay"),
        lr_decay_every=resolve(args.decay_every, settings, "lr_decay_every"),
        train_fraction=args.train_fraction,
        seed=resolve(args.seed, settings, "seed"),
    )
    arch = EncoderArchitecture(n_z=volume.cfg.n_z, branch_width=args.branch_width,
                               trunk_widths=tuple(args.trunk_widths), leaky_slope=tc.leaky_slope)
    weights_path = Path(args.out_weights)
    manifest.config["train"] = asdict(tc)
    manifest.config["architecture"] = arch.to_dict()
    manifest.seeds["training"] = tc.seed

    started = time.perf_counter()
    w, history = train(volume, tc, arch, checkpoint_path=weights_path,
                       checkpoint_every=args.checkpoint_every, log_every=1)
    manifest.wall_times["training"] = time.perf_counter() - started
    manifest.record("weights", weights_path)
    manifest.record("history", history.save_csv(weights_path.with_suffix(".history.csv")))
    manifest.extra["final_train_loss"] = history.train_loss[-1]
    manifest.extra["final_val_loss"] = history.val_loss[-1]

    print(f"\n  ✓ Final training loss: {history.train_loss[-1]:.6g}")
    print(f"  ✓ Final validation loss: {history.val_loss[-1]:.6g}")
    print(f"  ✓ Weights written: {weights_path}")
    return 0


def cmd_infer(args, settings: Settings, manifest: RunManifest) -> int:
    banner("Encoder Inference", f"Volume: {args.volume}")
    volume = load_volume(args.volume)
    w = load_weights(args.weights)
    pm, elapsed = infer_volume(w, volume)
    losses = _write_map_outputs(manifest, Path(args.out), pm, volume)
    manifest.wall_times["compute"] = elapsed

    print(f"  ✓ Mean loss: {losses.mean():.6g}")
    print(f"  ✓ Inference time: {elapsed:.3f}s")
    return 0


def cmd_hybrid(args, settings: Settings, manifest: RunManifest) -> int:
    banner("Encoder-Initialised Trust-Region Fit (AE+TRA)", f"Volume: {args.volume}")
    volume = load_volume(args.volume)
    w = load_weights(args.weights)
    opts = _fit_options(args, settings, volume.cfg)
    threads = resolve(args.threads, settings, "threads")
    out = Path(args.out)

    ae_map, inference_time = infer_volume(w, volume)
    pm, reports = fit_volume(volume, opts, ae_map, workers=threads)

    manifest.record("ae_params", save_param_map(ae_map, out / "ae_params.npy"))
    losses = _write_map_outputs(manifest, out, pm, volume)
    manifest.record("fit_summary", save_profile_csv(reports.summary(), out / "fit_summary.csv"))
    manifest.wall_times.update({
        "inference": inference_time,
        "refinement": reports.total_wall_time,
        "compute": inference_time + reports.total_wall_time,
    })
    manifest.extra["mean_iterations"] = float(reports.iterations.mean())
    manifest.extra["workers"] = threads

    violations = int((reports.final_loss > reports.initial_loss).sum())
    print(f"  ✓ Mean loss: {losses.mean():.6g} (encoder alone: {reports.initial_loss.mean():.6g})")
    print(f"  ✓ Pixels worse than the encoder start: {violations}")
    return 0


def cmd_eval(args, settings: Settings, manifest: RunManifest) -> int:
    banner("Compare Reconstructions", f"Volume: {args.volume}")
    volume = load_volume(args.volume)
    out = Path(args.out)

    masks: List[RegionMask] = [RegionMask("all", np.ones((volume.n_x, volume.n_y), dtype=bool))]
    for name, path in args.masks or []:
        masks.append(load_mask(path, name))
        manifest.inputs[f"mask_{name}"] = str(path)

    results = []
    for name, path in args.maps:
        pm = load_param_map(path)
        run = read_manifest(path.parent)
        results.append(MethodResult(
            method=name,
            param_map=pm,
            wall_time=float(run.get("wall_times", {}).get("compute", float("nan"))),
            per_pixel_loss=per_pixel_losses(pm, volume),
            mean_iterations=run.get("extra", {}).get("mean_iterations"),
        ))
        manifest.inputs[f"map_{name}"] = str(path)

    report = compare_methods(results, masks)
    for key, path in report.save(out).items():
        manifest.record(key, path)
    print(report.to_text())

    if args.truth is not None:
        truth = load_param_map(args.truth)
        for r in results:
            errors = param_errors(r.param_map, truth)
            manifest.record(f"errors_{r.method}", save_profile_csv(errors.reset_index(), out / f"errors_{r.method}.csv"))
            print(f"\nParameter errors ({r.method})")
            print(errors.to_string())

    if args.row is not None:
        intensity = {"raw": raw_intensity(volume)}
        intensity.update({r.method: r.param_map.intensity() for r in results})
        manifest.record("intensity_profile",
                        save_profile_csv(line_profile_frame(intensity, args.row), out / "intensity_profile.csv"))
        loss_grids = {r.method: r.per_pixel_loss for r in results}
        manifest.record("loss_profile",
                        save_profile_csv(line_profile_frame(loss_grids, args.row), out / "loss_profile.csv"))
    return 0


def cmd_export(args, settings: Settings, manifest: RunManifest) -> int:
    banner("Export Parameter Maps", f"Map: {args.map}")
    pm = load_param_map(args.map)
    for key, path in export_param_maps(pm, args.dir).items():
        manifest.record(key, path)
    print(f"  ✓ {len(manifest.outputs)} files written to {args.dir}")
    return 0


def cmd_check_env(args, settings: Settings, manifest: Optional[RunManifest]) -> int:
    banner("Checking configuration")
    env_path = Path(args.config) if args.config else Path(".env")
    if env_path.exists():
        print(f"  ✓ Config file: {env_path.absolute()}")
    else:
        print(f"  - No config file at {env_path.absolute()}, using environment and defaults")
    for key, value in settings.as_dict().items():
        print(f"  THZ_{key.upper():<18} = {value}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="path to a .env style config file")
    common.add_argument("--threads", type=int, default=None, help="worker processes (default: logical cores)")
    common.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING, ...")

    parser = argparse.ArgumentParser(prog="thz_processing", description="THz parameter reconstruction")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="synthesize a volume with ground truth")
    p.add_argument("--nx", type=int, required=True)
    p.add_argument("--ny", type=int, required=True)
    p.add_argument("--nz", type=int, default=None)
    p.add_argument("--omega", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--noise-sigma", type=float, default=None)
    p.add_argument("--ranges", type=_ranges_arg, default=None,
                   help="e.g. amplitude=0.1:5,sigma=0.05:1,mu=10:80")
    p.add_argument("--layout", choices=("uniform", "materials", "steps"), default="uniform")
    p.add_argument("--precision", choices=("float32", "float64"), default="float32")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    def solver_flags(p):
        p.add_argument("--max-iters", type=int, default=None)
        p.add_argument("--tol", type=float, default=None, help="projected-gradient tolerance")
        p.add_argument("--step-tol", type=float, default=None)

    p = sub.add_parser("fit-tra", parents=[common], help="trust-region fit of every pixel")
    p.add_argument("--volume", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--init", choices=("heuristic", "map"), default="heuristic")
    p.add_argument("--init-map", type=Path, default=None)
    solver_flags(p)
    p.set_defaults(func=cmd_fit_tra)

    p = sub.add_parser("train", parents=[common], help="train the encoder")
    p.add_argument("--volume", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--decay", type=float, default=None)
    p.add_argument("--decay-every", type=int, default=None)
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--branch-width", type=int, default=64)
    p.add_argument("--trunk-widths", type=int, nargs=3, default=[128, 128, 64])
    p.add_argument("--checkpoint-every", type=int, default=50)
    p.add_argument("--out-weights", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", parents=[common], help="encoder prediction for every pixel")
    p.add_argument("--volume", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("hybrid", parents=[common], help="trust-region fit started from the encoder")
    p.add_argument("--volume", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--out", required=True)
    solver_flags(p)
    p.set_defaults(func=cmd_hybrid)

    p = sub.add_parser("eval", parents=[common], help="compare reconstructions by region")
    p.add_argument("--volume", required=True)
    p.add_argument("--maps", type=_named_path, nargs="+", required=True, metavar="NAME=PATH")
    p.add_argument("--masks", type=_named_path, nargs="*", default=None, metavar="NAME=PATH")
    p.add_argument("--truth", type=Path, default=None)
    p.add_argument("--row", type=int, default=None, help="scan line for intensity and loss profiles")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export", parents=[common], help="write CSV grids and PGM images of a map")
    p.add_argument("--map", required=True)
    p.add_argument("--dir", required=True)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("check-env", parents=[common], help="show the resolved configuration")
    p.set_defaults(func=cmd_check_env)
    return parser


def _manifest_path(args) -> Optional[Path]:
    if args.command == "check-env":
        return None
    if args.command == "train":
        return Path(args.out_weights).with_suffix(".manifest.json")
    if args.command == "export":
        return Path(args.dir) / "manifest.json"
    return Path(args.out) / "manifest.json"


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "init", None) == "map" and args.init_map is None:
        parser.error("--init map requires --init-map PATH")

    try:
        settings = load_settings(args.config)
    except ThzError as e:
        print(f"\n❌ Error: {e}")
        return 2

    logging.basicConfig(
        level=(args.log_level or settings.log_level).upper(),
        format="%(asctime)s - %(levelname)s - %(message)s",
    )

    manifest_path = _manifest_path(args)
    manifest = None
    if manifest_path is not None:
        command_line = list(argv) if argv is not None else sys.argv[1:]
        manifest = RunManifest(command=" ".join(command_line), config=settings.as_dict())
        for key in ("volume", "weights", "map"):
            if getattr(args, key, None):
                manifest.inputs[key] = str(getattr(args, key))

    started = time.perf_counter()
    try:
        code = args.func(args, settings, manifest)
        if manifest is not None:
            manifest.wall_times["total"] = time.perf_counter() - started
            manifest.write(manifest_path)
    except (ThzError, ValueError, OSError) as e:
        if manifest is not None:
            manifest.cleanup()
        print(f"\n❌ Error in {args.command}: {e}")
        return 1

    print(f"\n✅ {args.command} complete")
    return code


if __name__ == "__main__":
    sys.exit(main())
