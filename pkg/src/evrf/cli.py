"""Command-line entry point: ``evrf <command> ...``.

Every failure exits nonzero with a single stderr line of the form
``evrf: error: <kind>: <message>``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import edi, events, io, scene, trainer
from .field import load_checkpoint
from .motion import CameraPose, Intrinsics

logger = logging.getLogger("evrf")


class CliError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


def _load_config_file(path) -> dict:
    path = Path(path)
    if path.suffix == ".toml":
        return io.read_toml(path)
    return io.read_json(path)


def cmd_simulate(args) -> int:
    if args.frames:
        seq, k, desc = scene.load_frame_sequence(args.frames)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        from .sim import SimConfig, simulate_events, synthesize_blur

        stream = simulate_events(seq, SimConfig(args.theta_pos or 0.25, args.theta_neg or 0.25))
        events.write_events(out / "events.evt", stream)
        io.write_image(out / "blur.pfm", synthesize_blur(seq))
        io.write_png(out / "blur.png", synthesize_blur(seq))
        print(f"{len(stream)} events -> {out}")
        return 0
    overrides = _load_config_file(args.config) if args.config else {}
    for key in ("n_views", "n_frames", "width", "height", "theta_pos", "theta_neg"):
        val = getattr(args, key)
        if val is not None:
            overrides[key] = val
    if args.randomize_speed:
        overrides["randomize_speed"] = True
    if args.seed is not None:
        overrides.setdefault("seed", args.seed)
    try:
        cfg = scene.SceneConfig(**overrides)
    except (TypeError, ValueError) as e:
        raise CliError("config", str(e)) from None
    path = scene.simulate_command(cfg, args.out)
    print(path)
    return 0


def _read_stream(path, t_start=None, t_end=None, width=None, height=None):
    path = Path(path)
    if path.suffix == ".csv":
        if width is None or height is None:
            raise CliError("config", "CSV events need --width and --height")
        return events.read_events_csv(path, width, height, t_start, t_end)
    return events.read_events(path, t_start, t_end)


def _split(stream, bins, mode):
    return events.split_by_count(stream, bins) if mode == "count" else events.split_by_time(stream, bins)


def cmd_split(args) -> int:
    stream = _read_stream(args.events, args.t_start, args.t_end, args.width, args.height)
    bs = _split(stream, args.bins, args.mode)
    mask = events.spatial_mask(bs)
    report = {"b": bs.b, "mode": args.mode, "split_times": bs.split_times.tolist(), "weights": bs.weights.tolist(),
              "sizes": bs.sizes.tolist(), "blur_fraction": mask.blur_fraction}
    text = json.dumps(report, indent=2)
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text)
    return 0


def cmd_deblur(args) -> int:
    blur = io.read_image(args.image)
    stream = _read_stream(args.events, args.t_start, args.t_end, blur.shape[1], blur.shape[0])
    if stream.t_exp <= 0:
        raise CliError("value", f"{args.events}: exposure is empty; pass --t-start/--t-end")
    bs = _split(stream, args.bins, args.mode)
    result = edi.edi_deblur(blur, bs, args.theta)
    for p in edi.export_frames(result, args.out):
        print(p)
    return 0


def _train_config(args) -> trainer.TrainConfig:
    d = _load_config_file(args.config) if args.config else {}
    if args.iterations is not None:
        d["iterations"] = args.iterations
    if args.seed is not None:
        d["seed"] = args.seed
    if args.deterministic:
        d["deterministic"] = True
    if args.threads is not None:
        d["threads"] = args.threads
    try:
        return trainer.TrainConfig.from_dict(d)
    except (TypeError, ValueError) as e:
        raise CliError("config", str(e)) from None


def cmd_train(args) -> int:
    cfg = _train_config(args)
    dataset, manifest = scene.load_scene(args.scene, cfg.b, cfg.split_mode)
    test_views = None
    if args.test:
        test_views, _ = scene.load_test_views(args.test)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_json(out / "run.json", {"scene": str(Path(args.scene).resolve()),
                                     "test": str(Path(args.test).resolve()) if args.test else None})
    result = trainer.train(dataset, cfg, manifest.near, manifest.far, test_views=test_views, run_dir=out,
                           progress=True)
    if test_views:
        renders = out / "renders"
        renders.mkdir(exist_ok=True)
        metrics = trainer.evaluate(result.field, test_views, manifest.near, manifest.far, cfg, out_dir=renders)
        io.write_json(out / "eval.json", metrics)
        print(f"mean PSNR {metrics['mean_psnr']:.3f} dB, mean SSIM {metrics['mean_ssim']:.4f}")
    print(out / "checkpoint.evrf")
    return 0


def _render_cfg(header: dict) -> trainer.TrainConfig:
    return trainer.TrainConfig(n_coarse=header.get("n_coarse", 16), n_fine=header.get("n_fine", 16),
                               background=header.get("background", 0.5))


def cmd_render(args) -> int:
    fld, header = load_checkpoint(args.ckpt)
    d = io.read_json(args.pose)
    try:
        pose = CameraPose.from_matrix(d["pose"])
        k = Intrinsics.from_dict(d["intrinsics"])
        size = (int(d["height"]), int(d["width"]))
    except (KeyError, ValueError) as e:
        raise CliError("format", f"{args.pose}: expected pose, intrinsics, width, height ({e})") from None
    img, depth = trainer.render_view(fld, pose, k, size, header["near"], header["far"], _render_cfg(header))
    io.write_image(args.out, img)
    if args.depth_out:
        io.write_pfm(args.depth_out, depth)
    print(args.out)
    return 0


def cmd_eval(args) -> int:
    fld, header = load_checkpoint(args.ckpt)
    views, d = scene.load_test_views(args.test)
    metrics = trainer.evaluate(fld, views, d.get("near", header["near"]), d.get("far", header["far"]),
                               _render_cfg(header))
    text = json.dumps(metrics, indent=2)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="evrf", description="Event-enhanced radiance fields from blurry images.")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--deterministic", action="store_true", help="single-threaded, deterministic kernels")
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a synthetic dataset")
    s.add_argument("--config", help="scene config (TOML or JSON)")
    s.add_argument("--frames", help="frame-sequence descriptor JSON; simulate one view from given frames")
    s.add_argument("--out", required=True)
    s.add_argument("--n-views", dest="n_views", type=int)
    s.add_argument("--n-frames", dest="n_frames", type=int)
    s.add_argument("--width", type=int)
    s.add_argument("--height", type=int)
    s.add_argument("--theta-pos", dest="theta_pos", type=float)
    s.add_argument("--theta-neg", dest="theta_neg", type=float)
    s.add_argument("--randomize-speed", dest="randomize_speed", action="store_true")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("split", help="split an event file into bins")
    s.add_argument("--events", required=True)
    s.add_argument("--bins", type=int, default=4)
    s.add_argument("--mode", choices=["count", "time"], default="count")
    s.add_argument("--t-start", dest="t_start", type=int)
    s.add_argument("--t-end", dest="t_end", type=int)
    s.add_argument("--width", type=int)
    s.add_argument("--height", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("deblur", help="EDI deblurring of one blurry image")
    s.add_argument("--image", required=True)
    s.add_argument("--events", required=True)
    s.add_argument("--bins", type=int, default=4)
    s.add_argument("--theta", type=float, default=0.3)
    s.add_argument("--mode", choices=["count", "time"], default="count")
    s.add_argument("--t-start", dest="t_start", type=int)
    s.add_argument("--t-end", dest="t_end", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_deblur)

    s = sub.add_parser("train", help="train a radiance field")
    s.add_argument("--scene", required=True)
    s.add_argument("--config")
    s.add_argument("--test")
    s.add_argument("--iterations", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("render", help="render one pose from a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--pose", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--depth-out", dest="depth_out")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("eval", help="PSNR/SSIM of a checkpoint on a test manifest")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--test", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)
    return p


_ERROR_KINDS = [
    (events.EventFormatError, "format"),
    (scene.SceneError, "scene"),
    (trainer.TrainingError, "training"),
    (FileNotFoundError, "io"),
    (OSError, "io"),
    (ValueError, "value"),
]


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.threads is not None and not args.deterministic:
        torch.set_num_threads(args.threads)
    if args.seed is not None:
        np.random.seed(args.seed)
    try:
        return args.func(args)
    except CliError as e:
        kind, msg = e.kind, str(e)
    except Exception as e:  # noqa: BLE001 - every failure becomes one diagnostic line
        kind = next((k for cls, k in _ERROR_KINDS if isinstance(e, cls)), "internal")
        msg = f"{type(e).__name__}: {e}" if kind == "internal" else str(e)
    print(f"evrf: error: {kind}: {' '.join(msg.split())}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
