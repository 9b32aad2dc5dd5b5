"""Training, checkpointing, inference and evaluation across both hierarchies."""

from __future__ import annotations

import json
import logging
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from . import metrics
from .a2l import A2LDiffusion
from .config import ExperimentConfig
from .geometry import (
    LandmarkSequence,
    NormalizationStats,
    RigidPose,
    apply_pose,
    canonicalize,
    canonicalize_sequence,
    compute_stats,
    denormalize,
)
from .l2i import ABLATIONS, L2IDiffusion
from .nn_utils import load_npz, save_npz
from .synthdata import ClipDataset, load_dataset, mouth_mask_from_image, save_png
from .validation import ShapeError

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# estimators from config


def make_a2l(cfg: ExperimentConfig, n_landmarks, audio_dim):
    a = cfg.a2l
    s = cfg.schedule
    return A2LDiffusion(
        n_landmarks=n_landmarks, audio_dim=audio_dim, hidden_dim=a.hidden_dim,
        n_blocks=a.n_blocks, window=a.window, kernel_size=a.kernel_size,
        temporal_unit=a.temporal_unit, mapping_unit=a.mapping_unit, residual=a.residual,
        objective=a.objective, n_timesteps=s.T, beta_start=s.beta_start, beta_end=s.beta_end,
        variance=s.variance, loss=a.loss, learning_rate=a.learning_rate,
        batch_size=a.batch_size, n_steps=cfg.train.steps, sample_stride=a.sample_stride,
        random_state=cfg.seed,
    )


def make_l2i(cfg: ExperimentConfig, image_size):
    c = cfg.l2i
    s = cfg.schedule
    return L2IDiffusion(
        image_size=image_size, factor=c.factor, base_width=c.base_width, pos_emb=c.pos_emb,
        codec=c.codec, drop_conditions=tuple(c.drop_conditions), tau=c.tau,
        mask_margin=c.mask_margin, n_timesteps=s.T, beta_start=s.beta_start,
        beta_end=s.beta_end, variance=s.variance, loss=c.loss, learning_rate=c.learning_rate,
        batch_size=c.batch_size, n_steps=cfg.train.steps, sample_stride=c.sample_stride,
        clip_denoised=c.clip_denoised, random_state=cfg.seed + 1,
    )


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    config: ExperimentConfig
    a2l: A2LDiffusion
    l2i: L2IDiffusion
    step: int = 0

    def save(self, path):
        meta = {
            "format": "headdiff-checkpoint/1",
            "config": self.config.to_dict(),
            "config_hash": self.config.hash(),
            "step": self.step,
            "schedule": self.a2l.schedule_.to_dict(),
            "a2l": {"params": self.a2l.get_params(), "step": self.a2l.step_,
                    "rng_state": self.a2l.rng_.bit_generator.state},
            "l2i": {"params": {**self.l2i.get_params(),
                               "drop_conditions": list(self.l2i.drop_conditions)},
                    "step": self.l2i.step_, "rng_state": self.l2i.rng_.bit_generator.state},
        }
        arrays = self.a2l.state_arrays()
        arrays.update(self.l2i.state_arrays())
        save_npz(path, meta, arrays)
        return Path(path)

    @classmethod
    def load(cls, path):
        meta, arrays = load_npz(path)
        if meta.get("format") != "headdiff-checkpoint/1":
            raise ValueError(f"{path} is not a checkpoint")
        cfg = ExperimentConfig.from_dict(meta["config"])
        a2l = A2LDiffusion(**meta["a2l"]["params"]).load_state_arrays(
            arrays, meta["a2l"]["rng_state"], meta["a2l"]["step"])
        lp = dict(meta["l2i"]["params"])
        lp["drop_conditions"] = tuple(lp["drop_conditions"])
        l2i = L2IDiffusion(**lp).load_state_arrays(arrays, meta["l2i"]["rng_state"],
                                                   meta["l2i"]["step"])
        return cls(cfg, a2l, l2i, meta["step"])


def _check_dataset(clips, cfg):
    if not clips:
        raise ValueError("dataset has no clips")
    L, D, H = clips[0].landmarks.n_landmarks, clips[0].audio.shape[1], clips[0].image_size
    for c in clips:
        if (c.landmarks.n_landmarks, c.audio.shape[1], c.image_size) != (L, D, H):
            raise ShapeError("clips in a dataset must share L, audio dim and image size")
        if len(c) < cfg.a2l.window:
            raise ShapeError(f"clip of {len(c)} frames shorter than window {cfg.a2l.window}")
    return L, D, H


def init_checkpoint(cfg: ExperimentConfig, clips):
    L, D, H = _check_dataset(clips, cfg)
    a2l = make_a2l(cfg, L, D).initialize()
    l2i = make_l2i(cfg, H).initialize()
    a2l.set_data([c.audio for c in clips], [c.canonical_landmarks() for c in clips])
    l2i.set_data(clips)
    return Checkpoint(cfg, a2l, l2i, 0)


def attach_data(ckpt: Checkpoint, clips):
    ckpt.a2l.set_data([c.audio for c in clips], [c.canonical_landmarks() for c in clips])
    ckpt.l2i.set_data(clips)
    return ckpt


def train_steps(ckpt: Checkpoint, n_steps, log_fh=None, log_every=1, t0=None):
    """Alternate one A2L and one L2I batch per step; the two losses never mix."""
    cfg = ckpt.config.train
    t0 = time.time() if t0 is None else t0
    for _ in range(n_steps):
        rec = {"step": ckpt.step + 1}
        rec["loss_a2l"] = ckpt.a2l.train_step() if cfg.train_a2l else None
        rec["loss_l2i"] = ckpt.l2i.train_step() if cfg.train_l2i else None
        ckpt.step += 1
        rec["wall_time"] = round(time.time() - t0, 4)
        if log_fh is not None and (ckpt.step % log_every == 0 or ckpt.step == 1):
            log_fh.write(json.dumps(rec) + "\n")
            log_fh.flush()
    return ckpt


def train(cfg: ExperimentConfig, data_dir, out_dir, resume=None):
    """Train both hierarchies and write periodic checkpoints; returns their paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    clips = load_dataset(data_dir)
    if resume is not None:
        ckpt = attach_data(Checkpoint.load(resume), clips)
    else:
        ckpt = init_checkpoint(cfg, clips)
    cfg.save(out / "config.json")
    paths = []
    every = max(1, cfg.train.checkpoint_every)
    t0 = time.time()
    with open(out / "train_log.jsonl", "a") as fh:
        while ckpt.step < cfg.train.steps:
            n = min(every - ckpt.step % every, cfg.train.steps - ckpt.step)
            train_steps(ckpt, n, fh, cfg.train.log_every, t0)
            path = ckpt.save(out / f"ckpt_{ckpt.step:06d}.npz")
            paths.append(path)
            log.info("step %d: wrote %s", ckpt.step, path)
    if not paths:
        paths.append(ckpt.save(out / f"ckpt_{ckpt.step:06d}.npz"))
    return paths


# ---------------------------------------------------------------------------
# inference


@dataclass
class TalkingStyle:
    """Everything inference may read from the source video besides its images."""

    stats: NormalizationStats
    poses: list
    reference_index: int
    reference_landmarks: np.ndarray  # image space


def extract_style(clip: ClipDataset, reference_index=0):
    canonical = canonicalize_sequence(clip.landmarks.points, clip.poses)
    return TalkingStyle(compute_stats(canonical), list(clip.poses), reference_index,
                        clip.landmarks.points[reference_index].copy())


def style_from_image(landmarks, pose: RigidPose, std="random", rng=None, std_scale=0.05):
    """Single-image mode: the image's canonical landmarks act as the mean.

    ``std`` is ``"random"`` (uniform in [0, std_scale) per coordinate) or an
    (L, 3) array borrowed from another video.
    """
    mean = canonicalize(landmarks, pose)
    if isinstance(std, str):
        if std != "random":
            raise ValueError(f"unknown std mode {std!r}")
        rng = np.random.default_rng(rng)
        std = rng.uniform(0, std_scale, size=mean.shape)
    std = np.asarray(std, dtype=np.float64)
    if std.shape != mean.shape:
        raise ShapeError("borrowed std does not match landmark shape")
    return TalkingStyle(NormalizationStats(mean, std), [pose], 0, np.asarray(landmarks, dtype=np.float64))


def window_starts(length, window, overlap):
    if overlap >= window:
        raise ValueError(f"overlap {overlap} must be smaller than window {window}")
    if length <= window:
        return [0]
    hop = window - overlap
    starts = list(range(0, length - window + 1, hop))
    if starts[-1] != length - window:
        starts.append(length - window)
    return starts


def window_stitch(windows, starts=None, length=None, overlap=0):
    """Join overlapping windows (n, l, ...) with linear cross-fades over overlaps."""
    windows = np.asarray(windows, dtype=np.float64)
    n, l = windows.shape[:2]
    if overlap >= l:
        raise ValueError(f"overlap {overlap} must be smaller than window {l}")
    if starts is None:
        starts = [k * (l - overlap) for k in range(n)]
    if length is None:
        length = starts[-1] + l
    out = np.zeros((length,) + windows.shape[2:])
    weight = np.zeros(length)
    j = np.arange(l)
    for k, (w, s) in enumerate(zip(windows, starts)):
        ramp = np.ones(l)
        if overlap > 0:
            if k > 0:
                ramp = np.minimum(ramp, (j + 1) / (overlap + 1))
            if k < n - 1:
                ramp = np.minimum(ramp, (l - j) / (overlap + 1))
        end = min(s + l, length)
        out[s:end] += (ramp[: end - s, None] * w[: end - s].reshape(end - s, -1)).reshape(out[s:end].shape)
        weight[s:end] += ramp[: end - s]
    return out / weight.reshape((-1,) + (1,) * (out.ndim - 1))


def frame_generators(seed, indices):
    """One independent torch stream per output frame, keyed by (seed, frame index)."""
    return [torch.Generator().manual_seed(int(np.random.SeedSequence([seed, int(i)]).generate_state(1)[0]))
            for i in indices]


def predict_landmarks(a2l: A2LDiffusion, audio, style: TalkingStyle, overlap=None, seed=0):
    """A2L over successive windows; returns normalized canonical (T, L, 3)."""
    audio = np.asarray(audio, dtype=np.float64)
    l = a2l.window
    n = len(audio)
    if n == 0:
        raise ShapeError("driving audio is empty")
    pad = max(0, l - n)
    if pad:
        # short audio: left-pad by repeating the first row
        audio = np.concatenate([np.repeat(audio[:1], pad, axis=0), audio])
    overlap = l // 4 if overlap is None or overlap < 0 else overlap
    starts = window_starts(len(audio), l, overlap)
    aw = np.stack([audio[s:s + l] for s in starts])
    gens = frame_generators(seed, range(len(starts)))
    out = a2l.predict(aw, style.stats.mean, generator=gens)
    seq = window_stitch(out, starts, len(audio), overlap)
    return seq[pad:]


def infer(ckpt: Checkpoint, clip: ClipDataset, audio=None, out_dir=None, seed=0, style=None,
          ablation="full", frame_indices=None):
    """Drive ``clip`` with ``audio`` (defaults to the clip's own audio).

    Only the talking style (mean/std, poses, reference frame) is read from the
    clip's landmarks; target-frame landmarks come from A2L. Source frames and
    poses are reused cyclically when the audio is longer than the clip.
    """
    audio = clip.audio if audio is None else np.asarray(audio)
    style = extract_style(clip) if style is None else style
    n_out = len(audio)
    norm = predict_landmarks(ckpt.a2l, audio, style, ckpt.config.infer.overlap, seed)
    canonical = denormalize(norm, style.stats)
    src = [i % len(clip) for i in range(n_out)]
    posed = np.stack([apply_pose(canonical[k], style.poses[src[k] % len(style.poses)])
                      for k in range(n_out)])
    indices = range(n_out) if frame_indices is None else frame_indices
    l2i = ckpt.l2i
    drop = ABLATIONS[ablation] if isinstance(ablation, str) else tuple(ablation)
    saved_drop = l2i.drop_conditions
    l2i.drop_conditions = tuple(sorted(set(saved_drop) | set(drop)))
    frames = []
    try:
        bs = max(1, ckpt.config.infer.batch_frames)
        idx = list(indices)
        for b in range(0, len(idx), bs):
            chunk = idx[b:b + bs]
            frames.append(l2i.generate_frames(
                clip, [src[k] for k in chunk], landmarks=posed[chunk],
                ref_index=style.reference_index, generator=frame_generators(seed, chunk),
                ref_landmarks=style.reference_landmarks))
    finally:
        l2i.drop_conditions = saved_drop
    frames = np.concatenate(frames) if frames else np.zeros((0,) + clip.images.shape[1:])
    result = {"frames": frames, "normalized": norm, "canonical": canonical, "posed": posed,
              "frame_indices": list(indices), "source_indices": src}
    if out_dir is not None:
        write_frames(result, out_dir, clip.fps, seed)
    return result


def write_frames(result, out_dir, fps, seed=0):
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    for k, img in zip(result["frame_indices"], result["frames"]):
        save_png(img, out / "frames" / f"{k:06d}.png")
    np.asarray(result["posed"], dtype="<f4").tofile(out / "landmarks.bin")
    np.asarray(result["canonical"], dtype="<f4").tofile(out / "canonical.bin")
    L = result["posed"].shape[1]
    manifest = {"format": "headdiff-video/1", "fps": float(fps),
                "frame_count": len(result["frame_indices"]), "T": int(len(result["posed"])),
                "L": int(L), "seed": int(seed)}
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return out


# ---------------------------------------------------------------------------
# evaluation

REPORT_KEYS = ("lmd", "lmd_v", "ma", "error_norm", "jitter", "frame_consistency")


def clip_metrics(clip: ClipDataset, canonical, posed, frames, frame_indices):
    gt_can = clip.canonical_landmarks()
    gt_img = clip.landmarks.points
    T = len(canonical)
    mi = clip.mouth_idx
    vals = {
        "lmd": metrics.lmd(posed, gt_img[:T], mi),
        "lmd_v": metrics.lmd_v(posed, gt_img[:T], mi),
        "ma": metrics.mouth_iou(LandmarkSequence(posed), LandmarkSequence(gt_img[:T]), mi),
        "error_norm": metrics.error_norm(canonical, gt_can[:T]),
        "jitter": metrics.jitter(canonical),
        "frame_consistency": metrics.frame_consistency(frames) if len(frames) >= 2 else 1.0,
    }
    if len(frames) and clip.palette:
        pm = np.stack([mouth_mask_from_image(f, clip.palette) for f in frames])
        gm = np.stack([mouth_mask_from_image(clip.images[i], clip.palette) for i in frame_indices])
        vals["ma_image"] = metrics.mouth_iou(pm, gm)
    return vals


def evaluate(checkpoints, clips, out_dir=None, ablations=None, seed=0, max_frames=None,
             include_ground_truth=False, labels=None):
    """One report row per (checkpoint, ablation); values are means over clips."""
    if isinstance(checkpoints, Checkpoint):
        checkpoints = [checkpoints]
    rows = []
    if include_ground_truth:
        reps = []
        for clip in clips:
            idx = _eval_indices(len(clip), max_frames)
            vals = clip_metrics(clip, clip.canonical_landmarks(), clip.landmarks.points,
                                clip.images[idx], idx)
            reps.append(metrics.MetricReport(vals, len(clip), 1))
        rows.append(metrics.MetricReport.mean(reps, "ground_truth").to_dict())
    for n, ckpt in enumerate(checkpoints):
        abl = ablations or ckpt.config.eval.ablations
        tag = labels[n] if labels else (f"ckpt{n}" if len(checkpoints) > 1 else "")
        per_ablation = {a: [] for a in abl}
        for clip in clips:
            idx = _eval_indices(len(clip), max_frames)
            for a in abl:
                res = infer(ckpt, clip, seed=seed, ablation=a, frame_indices=idx)
                vals = clip_metrics(clip, res["canonical"], res["posed"], res["frames"], idx)
                per_ablation[a].append(metrics.MetricReport(vals, len(idx), 1))
        for a, reps in per_ablation.items():
            row = metrics.MetricReport.mean(reps, f"{tag}:{a}" if tag else a).to_dict()
            row.update({"ablation": a, "tau": ckpt.config.l2i.tau, "step": ckpt.step,
                        "a2l_objective": ckpt.config.a2l.objective,
                        "temporal_unit": ckpt.config.a2l.temporal_unit,
                        "mapping_unit": ckpt.config.a2l.mapping_unit})
            rows.append(row)
    if out_dir is not None:
        metrics.write_reports(rows, out_dir)
        from .plots import plot_report

        plot_report(rows, Path(out_dir) / "report.png")
    return rows


def _eval_indices(n, max_frames):
    if not max_frames or max_frames >= n:
        return list(range(n))
    return list(np.linspace(0, n - 1, max_frames).round().astype(int))


def sweep_tau(cfg: ExperimentConfig, clips, test_clips, taus=(10, 20, 40), out_dir=None,
              steps=None, max_frames=None, seed=0):
    """Train one L2I per reference interval (A2L shared) and report them side by side."""
    base = init_checkpoint(replace(cfg, train=replace(cfg.train, train_l2i=False)), clips)
    train_steps(base, steps if steps is not None else cfg.train.steps)
    ckpts = []
    for tau in taus:
        c = replace(cfg, l2i=replace(cfg.l2i, tau=int(tau)),
                    train=replace(cfg.train, train_a2l=False))
        ck = init_checkpoint(c, clips)
        ck.a2l = base.a2l
        train_steps(ck, steps if steps is not None else c.train.steps)
        ckpts.append(ck)
    return evaluate(ckpts, test_clips, out_dir, ablations=["full"], seed=seed,
                    max_frames=max_frames, labels=[f"tau={t}" for t in taus])


def configure_logging(level=logging.INFO):
    logging.basicConfig(stream=sys.stderr, level=level,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
