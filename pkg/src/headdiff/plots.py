"""Matplotlib figures: loss curves, report bars, mouth-opening traces, denoising strips.

Every function writes one file and returns its path. Files are saved without
timestamps in their metadata so identical inputs give identical bytes.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

REPORT_METRICS = ("lmd", "lmd_v", "ma", "error_norm", "jitter", "frame_consistency")


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"Software": None} if path.suffix == ".png" else {"Date": None, "Creator": None}
    fig.savefig(path, dpi=100, metadata=meta)
    plt.close(fig)
    return path


def read_log(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def plot_loss_curves(records, path):
    if isinstance(records, (str, Path)):
        records = read_log(records)
    if not records:
        raise ValueError("training log is empty")
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for key in ("loss_a2l", "loss_l2i"):
        pts = [(r["step"], r[key]) for r in records if r.get(key) is not None]
        if pts:
            s, v = zip(*pts)
            ax.plot(s, v, label=key)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def load_report(path):
    with open(path) as fh:
        rows = json.load(fh).get("rows", [])
    return rows


def plot_report(rows, path, keys=REPORT_METRICS):
    """One small bar chart per metric with a bar per report row."""
    if isinstance(rows, (str, Path)):
        rows = load_report(rows)
    if not rows:
        raise ValueError("report has no rows to plot")
    keys = [k for k in keys if any(k in r for r in rows)]
    if not keys:
        raise ValueError("report rows carry none of the known metrics")
    labels = [r.get("label") or f"row{i}" for i, r in enumerate(rows)]
    fig, axes = plt.subplots(1, len(keys), figsize=(2.2 * len(keys), 3.2), squeeze=False)
    for ax, k in zip(axes[0], keys):
        ax.bar(range(len(rows)), [r.get(k, np.nan) for r in rows], color="C0")
        ax.set_title(k, fontsize=9)
        ax.set_xticks(range(len(rows)))
        ax.set_xticklabels(labels, rotation=60, ha="right", fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


def plot_mouth_trajectory(predicted, ground_truth, path, fps=25.0, labels=("predicted", "ground truth")):
    """Overlay two mouth-opening traces over time (seconds)."""
    p = np.asarray(predicted, dtype=np.float64)
    g = np.asarray(ground_truth, dtype=np.float64)
    if p.size == 0:
        raise ValueError("empty trajectory")
    fig, ax = plt.subplots(figsize=(7, 3))
    ax.plot(np.arange(len(g)) / fps, g, label=labels[1], color="k", lw=1.5)
    ax.plot(np.arange(len(p)) / fps, p, label=labels[0], color="C3", lw=1.0)
    ax.set_xlabel("time (s)")
    ax.set_ylabel("mouth opening")
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def plot_denoising_strip(images, path, steps=None):
    """A row of images from the reverse chain, noisiest on the left."""
    imgs = [np.clip(np.asarray(im, dtype=np.float64), 0, 1) for im in images]
    if not imgs:
        raise ValueError("no images to plot")
    fig, axes = plt.subplots(1, len(imgs), figsize=(1.4 * len(imgs), 1.7), squeeze=False)
    for k, (ax, im) in enumerate(zip(axes[0], imgs)):
        ax.imshow(im, interpolation="nearest")
        ax.set_axis_off()
        if steps is not None:
            ax.set_title(f"t={steps[k]}", fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


def denoising_frames(l2i, cond, n_snapshots=6, generator=None):
    """Decode intermediate predicted clean images along one reverse chain."""
    import torch

    from . import ddpm
    from .l2i import to_channels_last

    cond = cond.drop(l2i.drop_conditions)
    shape = (1, l2i.codec_.latent_channels, l2i.latent_size_, l2i.latent_size_)
    ladder = ddpm.timestep_ladder(l2i.schedule_.T, l2i.sample_stride)
    keep = set(np.linspace(0, len(ladder) - 1, n_snapshots).round().astype(int).tolist())
    keep_t = {ladder[k] for k in keep}
    snaps, steps = [], []

    def grab(t, x):
        if t in keep_t:
            snaps.append(x.clone())
            steps.append(t)

    l2i.model_.eval()
    gen = generator if generator is not None else torch.Generator().manual_seed(0)
    ddpm.sample(l2i.model_, shape, cond, l2i.schedule_, gen, l2i.sample_stride, callback=grab,
                clip_range=l2i.clip_range())
    imgs = [np.clip(l2i.codec_.inverse_transform(to_channels_last(z))[0], 0, 1) for z in snaps]
    return imgs, steps
