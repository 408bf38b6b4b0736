"""Command-line entry points: scene generation, training, rendering,
evaluation, the decay-variant ablation sweep, and gradient checking.

Exit codes: 0 success, 2 usage error, 3 data error (missing or malformed
inputs), 4 verification failure (gradient check did not pass).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, gradcheck
from .camera import Camera
from .errors import (
    CorruptCheckpointError,
    DataError,
    InvalidCameraError,
    InvalidParameterError,
    PpmFormatError,
    Splat4dError,
    UnsupportedVersionError,
    VerificationError,
)
from .io import load_checkpoint, write_ppm
from .raster import RasterConfig, render_forward
from .scenegen import PRESET_TAGS, RigSpec, ScenePreset, build_dataset, load_dataset
from .trainer import (
    TrainConfig,
    checkpoint_policy,
    evaluate_checkpoint,
    train,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_VERIFY = 4

ABLATION_VARIANTS = (
    ("none", "none", False),
    ("constant", "constant", False),
    ("pow", "pow", False),
    ("exp", "exp", False),
    ("neural", "neural", False),
    ("neural_novis", "neural", True),
)


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="splat4d",
        description="4D Gaussian splatting with learned opacity decay",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scene", help="generate a synthetic dataset")
    p.add_argument("--preset", choices=PRESET_TAGS, required=True)
    p.add_argument("--cams", type=int, default=4, help="training cameras")
    p.add_argument("--test-cams", type=int, default=4, help="held-out cameras")
    p.add_argument("--span", type=float, default=110.0, help="arc span, degrees")
    p.add_argument("--frames", type=int, default=30)
    p.add_argument("--size", type=int, default=96, help="square image size")
    p.add_argument("--fov", type=float, default=50.0)
    p.add_argument("--radius", type=float, default=3.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_scene)

    p = sub.add_parser("train", help="optimize a model against a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="JSON file of TrainConfig fields")
    p.add_argument("--decay", choices=[v[0] for v in ABLATION_VARIANTS[:5]],
                   help="override the decay variant")
    p.add_argument("--iterations", type=int, help="override iteration count")
    p.add_argument("--seed", type=int, help="override the RNG seed")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="metrics log path (default: OUT.log.jsonl)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render one view from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--camera-id", type=int, help="camera id from --data")
    p.add_argument("--pose", help="JSON camera description")
    p.add_argument("--data", help="dataset directory (for --camera-id)")
    p.add_argument("--time", type=float, required=True)
    p.add_argument("--out", required=True, help="output PPM path")
    p.add_argument("--depth", help="also write a normalized depth PPM here")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="metrics table for a dataset split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--report", help="write the table to this file")
    p.add_argument("--dssim-halved", type=_parse_bool, default=True,
                   help="report (1-SSIM)/2 when true, 1-SSIM when false")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train every decay variant and report")
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="JSON file of TrainConfig fields")
    p.add_argument("--seed", type=int, help="override the RNG seed")
    p.add_argument("--out", required=True, help="report directory")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def cmd_gen_scene(args) -> int:
    preset = ScenePreset(tag=args.preset, frames=args.frames)
    rig = RigSpec(
        n_train_cameras=args.cams,
        n_test_cameras=args.test_cams,
        span_deg=args.span,
        radius=args.radius,
        width=args.size,
        height=args.size,
        fov_deg=args.fov,
    )
    dataset = build_dataset(preset, rig, args.out, seed=args.seed)
    print(f"wrote {len(dataset.frames)} frames under {args.out}")
    print(f"manifest: {Path(args.out) / 'manifest.json'}")
    return EXIT_OK


def _load_train_config(args) -> TrainConfig:
    fields = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise DataError(f"no config file at {path}")
        try:
            with open(path) as fh:
                fields = json.load(fh)
        except json.JSONDecodeError as e:
            raise DataError(f"unreadable config {path}: {e}") from e
        if not isinstance(fields, dict):
            raise DataError(f"config {path} must hold a JSON object")
    if getattr(args, "decay", None):
        fields["decay_variant"] = args.decay
    if getattr(args, "iterations", None) is not None:
        fields["iterations"] = args.iterations
    if getattr(args, "seed", None) is not None:
        fields["rng_seed"] = args.seed
    return TrainConfig.from_json(fields)


def cmd_train(args) -> int:
    dataset = load_dataset(args.data)
    cfg = _load_train_config(args)
    log_path = args.log if args.log else str(args.out) + ".log.jsonl"

    def progress(report):
        if (report.iteration + 1) % 500 == 0 or report.iteration == 0:
            print(
                f"iter {report.iteration + 1:>6}/{cfg.iterations}"
                f"  loss {report.total:.5f}  train psnr {report.train_psnr:.2f}"
                f"  gaussians {report.n_gaussians}"
            )

    result = train(dataset, cfg, ckpt_path=args.out, log_path=log_path,
                   on_report=progress)
    print(f"checkpoint: {args.out}")
    print(f"metrics log: {log_path}")
    if result.evals:
        last = result.evals[-1]
        print(
            f"held-out psnr {last['psnr']:.2f} dB"
            f"  dssim1 {last['dssim1']:.4f}  dssim2 {last['dssim2']:.4f}"
        )
    return EXIT_OK


def cmd_render(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    background = np.zeros(3)
    if args.camera_id is not None:
        if not args.data:
            raise InvalidParameterError("--camera-id needs --data to look it up")
        dataset = load_dataset(args.data)
        if args.camera_id not in dataset.cameras:
            raise DataError(f"dataset has no camera id {args.camera_id}")
        camera = dataset.cameras[args.camera_id]
        background = dataset.background
    elif args.pose:
        pose_path = Path(args.pose)
        if not pose_path.exists():
            raise DataError(f"no pose file at {pose_path}")
        try:
            with open(pose_path) as fh:
                camera = Camera.from_json(json.load(fh))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise DataError(f"unreadable pose {pose_path}: {e}") from e
    else:
        raise InvalidParameterError("render needs --camera-id or --pose")
    raster = RasterConfig(eps_t=float(ckpt.config_echo.get("eps_t", 0.05)))
    out, _ = render_forward(
        ckpt.to_cloud(), camera, args.time, background, config=raster,
        policy=checkpoint_policy(ckpt), net=ckpt.to_net(), aabb=ckpt.aabb64(),
    )
    write_ppm(args.out, out.image)
    print(f"image: {args.out}")
    if args.depth:
        norm = np.clip(
            (out.depth - camera.near) / (camera.far - camera.near), 0.0, 1.0
        )
        write_ppm(args.depth, norm)
        print(f"depth: {args.depth}")
    return EXIT_OK


def _format_report(result: dict, halved: bool, header_note: str) -> str:
    scale = 1.0 if halved else 2.0
    lines = [
        "# splat4d evaluation report",
        f"# {header_note}",
        "# renders quantized to 8 bits before metrics; dssim column scale: "
        + ("(1-ssim)/2" if halved else "1-ssim"),
        "path,camera_id,time,psnr_db,dssim1,dssim2",
    ]
    for row in result["per_frame"]:
        lines.append(
            f"{row['path']},{row['camera_id']},{row['time']:.6f},"
            f"{row['psnr']:.6f},{scale * row['dssim1']:.6f},"
            f"{scale * row['dssim2']:.6f}"
        )
    lines.append(
        f"mean,,,{result['psnr']:.6f},{scale * result['dssim1']:.6f},"
        f"{scale * result['dssim2']:.6f}"
    )
    return "\n".join(lines) + "\n"


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    dataset = load_dataset(args.data)
    result = evaluate_checkpoint(ckpt, dataset, split=args.split)
    note = f"checkpoint: {args.ckpt}; data: {args.data}; split: {args.split}"
    text = _format_report(result, args.dssim_halved, note)
    print(text, end="")
    if args.report:
        with open(args.report, "w") as fh:
            fh.write(text)
        print(f"report: {args.report}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    dataset = load_dataset(args.data)
    base = _load_train_config(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, variant, no_vis in ABLATION_VARIANTS:
        cfg = dataclasses.replace(base, decay_variant=variant,
                                  no_visibility=no_vis)
        print(f"[{name}] training {cfg.iterations} iterations ...")
        result = train(dataset, cfg)
        final_eval = evaluate_checkpoint(result.checkpoint, dataset, "test")
        report = {
            "variant": name,
            "config": cfg.to_json(),
            "summary": result.summary,
            "final_eval": final_eval,
        }
        path = out_dir / f"{name}.json"
        with open(path, "w") as fh:
            json.dump(report, fh, indent=1, sort_keys=True)
            fh.write("\n")
        print(
            f"[{name}] test psnr {final_eval['psnr']:.2f} dB"
            f"  distractors>0.1 {result.summary['n_distractors_opaque']}"
            f"  -> {path}"
        )
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results, ok = gradcheck.run_all(seed=args.seed)
    for r in results:
        print(r.line())
    if not ok:
        print("gradient check FAILED", file=sys.stderr)
        return EXIT_VERIFY
    print("all gradient suites passed")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (InvalidParameterError, InvalidCameraError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CorruptCheckpointError, UnsupportedVersionError,
            PpmFormatError, FileNotFoundError, IsADirectoryError,
            NotADirectoryError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except VerificationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VERIFY
    except Splat4dError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
