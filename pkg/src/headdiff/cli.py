"""Command-line entry point: ``headdiff gen-data | train | infer | eval | plot``.

Settings resolve as defaults < ``--config`` file < explicit flags. The global
seed defaults to the ``DREAMHEAD_SEED`` environment variable when set.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import metrics, pipeline, plots
from .config import ConfigError, ExperimentConfig, merge_overrides
from .synthdata import generate_dataset, load_clip, load_dataset

log = logging.getLogger("headdiff")

SEED_ENV = "DREAMHEAD_SEED"


def env_seed():
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(args):
    cfg = ExperimentConfig.load(args.config) if getattr(args, "config", None) else ExperimentConfig()
    overrides = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k] = parse_value(v)
    seed = args.seed if args.seed is not None else env_seed()
    if seed is not None:
        overrides["seed"] = seed
        overrides["generator.seed"] = seed
    return merge_overrides(cfg, overrides) if overrides else cfg


def load_audio(path):
    """Driving audio from a clip directory or a ``.npy`` array of shape (T, D_a)."""
    p = Path(path)
    if p.is_dir():
        return load_clip(p).audio
    arr = np.load(p)
    if arr.ndim != 2:
        raise ValueError(f"audio array must be (T, D_a), got {arr.shape}")
    return arr


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args):
    cfg = load_config(args)
    gen = cfg.generator
    if args.frames is not None:
        gen = replace(gen, n_frames=args.frames)
    if args.image_size is not None:
        gen = replace(gen, image_size=args.image_size)
    if args.clips < 0:
        raise ValueError("--clips must be >= 0")
    names = generate_dataset(args.out, args.clips, gen)
    log.info("wrote %d clips to %s", len(names), args.out)


def cmd_train(args):
    cfg = load_config(args)
    if args.steps is not None:
        cfg = merge_overrides(cfg, {"train.steps": args.steps})
    data = args.data or cfg.train_data
    if not data:
        raise ConfigError("no training data: pass --data or set train_data in the config")
    paths = pipeline.train(cfg, data, args.out, resume=args.resume)
    log.info("wrote %d checkpoints, last %s", len(paths), paths[-1])


def cmd_infer(args):
    ckpt = pipeline.Checkpoint.load(args.ckpt)
    clip = load_clip(args.clip)
    audio = load_audio(args.audio) if args.audio else None
    seed = args.seed if args.seed is not None else (env_seed() or 0)
    res = pipeline.infer(ckpt, clip, audio, args.out, seed=seed, ablation=args.ablation)
    log.info("wrote %d frames to %s", len(res["frames"]), args.out)


def cmd_eval(args):
    seed = args.seed if args.seed is not None else (env_seed() or 0)
    clips = load_dataset(args.data)
    if not clips:
        raise ValueError(f"no clips found in {args.data}")
    if args.sweep_tau:
        cfg = load_config(args)
        train = args.train_data or cfg.train_data
        if not train:
            raise ConfigError("--sweep-tau needs --train-data or train_data in the config")
        taus = [int(t) for t in args.sweep_tau.split(",")]
        rows = pipeline.sweep_tau(cfg, load_dataset(train), clips, taus, args.out,
                                  steps=args.steps, max_frames=args.max_frames, seed=seed)
    else:
        if not args.ckpt:
            raise ValueError("eval needs --ckpt (or --sweep-tau)")
        ckpts = [pipeline.Checkpoint.load(p) for p in args.ckpt]
        ablations = args.ablations.split(",") if args.ablations else None
        rows = pipeline.evaluate(ckpts, clips, args.out, ablations=ablations, seed=seed,
                                 max_frames=args.max_frames,
                                 include_ground_truth=args.ground_truth)
    log.info("wrote report with %d rows to %s", len(rows), args.out)


def cmd_plot(args):
    out = Path(args.out)
    written = []
    if not (args.report or args.log or args.clip):
        raise ValueError("plot needs --report, --log or --clip")
    if args.report:
        written.append(plots.plot_report(args.report, out / "report.png"))
    if args.log:
        written.append(plots.plot_loss_curves(args.log, out / "loss.png"))
    if args.clip:
        clip = load_clip(args.clip)
        gt = metrics.mouth_opening(clip.canonical_landmarks())
        if args.ckpt:
            ckpt = pipeline.Checkpoint.load(args.ckpt)
            seed = args.seed if args.seed is not None else (env_seed() or 0)
            style = pipeline.extract_style(clip)
            norm = pipeline.predict_landmarks(ckpt.a2l, clip.audio, style,
                                              ckpt.config.infer.overlap, seed)
            from .geometry import denormalize

            pred = metrics.mouth_opening(denormalize(norm, style.stats))
            written.append(plots.plot_mouth_trajectory(pred, gt, out / "mouth_trajectory.png",
                                                       clip.fps))
            posed = pipeline.infer(ckpt, clip, seed=seed, frame_indices=[])["posed"]
            cond = ckpt.l2i.condition_images(clip, 0, 0, posed[0], clip.landmarks.points[0])
            from .l2i import build_condition

            c = build_condition(ckpt.l2i.codec_, *[x[None] for x in cond])
            imgs, steps = plots.denoising_frames(ckpt.l2i, c)
            written.append(plots.plot_denoising_strip(imgs, out / "denoising.png", steps))
        else:
            written.append(plots.plot_mouth_trajectory(
                clip.articulation, gt, out / "mouth_trajectory.png", clip.fps,
                labels=("articulation", "ground-truth opening")))
    for p in written:
        log.info("wrote %s", p)


# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="headdiff", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="experiment config JSON")
            p.add_argument("--set", action="append", metavar="KEY=VALUE",
                           help="dotted config override, e.g. a2l.hidden_dim=256")
        p.add_argument("--seed", type=int, default=None,
                       help=f"global seed (default: ${SEED_ENV} or the config)")

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--clips", type=int, required=True)
    p.add_argument("--frames", type=int)
    p.add_argument("--image-size", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train both hierarchies")
    common(p)
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="generate frames for one clip")
    common(p, config=False)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--clip", required=True, help="source clip directory")
    p.add_argument("--audio", help="driving audio: clip directory or .npy (default: the clip's own)")
    p.add_argument("--ablation", default="full", choices=sorted(pipeline.ABLATIONS))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="evaluate checkpoints on test clips")
    common(p)
    p.add_argument("--ckpt", action="append")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ablations", help="comma-separated ablation names")
    p.add_argument("--max-frames", type=int, default=None)
    p.add_argument("--ground-truth", action="store_true", help="add a ground-truth row")
    p.add_argument("--sweep-tau", help="train and compare L2I at these intervals, e.g. 10,20,40")
    p.add_argument("--train-data")
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", help="render figures")
    common(p, config=False)
    p.add_argument("--report", help="report.json from eval")
    p.add_argument("--log", help="train_log.jsonl from train")
    p.add_argument("--clip", help="clip directory for trajectory plots")
    p.add_argument("--ckpt", help="with --clip: plot predictions and a denoising strip")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(stream=sys.stderr, level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (ConfigError, ValueError, OSError, KeyError, FloatingPointError) as exc:
        print(f"headdiff {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
