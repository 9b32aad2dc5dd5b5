"""Lip-sync and landmark-quality metrics.

Conventions:

* ``lmd`` / ``lmd_v`` use the image-plane (x, y) coordinates of mouth points.
* ``error_norm`` / ``jitter`` use all three coordinates, intended for canonical space.
* ``jitter`` is the mean norm of the second temporal difference, so constant
  velocity scores zero.
* ``frame_consistency`` is a stand-in smoothness score for videos (1 minus the
  mean absolute frame-to-frame change); it is not the TCM metric.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import LandmarkSequence
from .validation import ShapeError


def _points(seq):
    arr = seq.points if isinstance(seq, LandmarkSequence) else np.asarray(seq, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ShapeError(f"expected (T, L, 3) landmarks, got {arr.shape}")
    return arr


def _pair(pred, gt):
    p, g = _points(pred), _points(gt)
    if p.shape != g.shape:
        raise ShapeError(f"pred shape {p.shape} != gt shape {g.shape}")
    return p, g


def lmd(pred, gt, mouth_idx):
    """Mean 2-D distance between corresponding mouth landmarks."""
    p, g = _pair(pred, gt)
    idx = np.asarray(mouth_idx)
    return float(np.linalg.norm(p[:, idx, :2] - g[:, idx, :2], axis=-1).mean())


def lmd_v(pred, gt, mouth_idx):
    """LMD between the frame-to-frame velocities of pred and gt."""
    p, g = _pair(pred, gt)
    if p.shape[0] < 2:
        raise ShapeError("lmd_v needs at least 2 frames")
    return lmd(np.diff(p, axis=0), np.diff(g, axis=0), mouth_idx)


def error_norm(pred, gt):
    p, g = _pair(pred, gt)
    return float(np.linalg.norm(p - g, axis=-1).mean())


def jitter(seq):
    p = _points(seq)
    if p.shape[0] < 3:
        raise ShapeError("jitter needs at least 3 frames")
    acc = p[2:] - 2 * p[1:-1] + p[:-2]
    return float(np.linalg.norm(acc, axis=-1).mean())


def mouth_opening(seq, upper=(49, 50, 51, 52, 53, 61, 62, 63), lower=(55, 56, 57, 58, 59, 65, 66, 67)):
    """Per-frame lip gap: mean y of lower-lip points minus mean y of upper-lip points."""
    p = _points(seq)
    return p[:, list(lower), 1].mean(axis=1) - p[:, list(upper), 1].mean(axis=1)


def frame_consistency(frames):
    f = np.asarray(frames, dtype=np.float64)
    if f.shape[0] < 2:
        raise ShapeError("frame_consistency needs at least 2 frames")
    return float(np.mean(1.0 - np.abs(np.diff(f, axis=0)).reshape(f.shape[0] - 1, -1).mean(axis=1)))


# ---------------------------------------------------------------------------
# mouth-area IoU


def convex_hull(points):
    """Counter-clockwise hull of 2-D points (monotone chain); collinear input gives <= 2 vertices."""
    pts = sorted(set(map(tuple, np.asarray(points, dtype=np.float64)[:, :2])))
    if len(pts) <= 2:
        return np.asarray(pts)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.asarray(lower[:-1] + upper[:-1])


def _segment_distance(px, py, a, b):
    d = b - a
    denom = float(d @ d)
    if denom == 0:
        return np.hypot(px - a[0], py - a[1])
    s = np.clip(((px - a[0]) * d[0] + (py - a[1]) * d[1]) / denom, 0, 1)
    return np.hypot(px - (a[0] + s * d[0]), py - (a[1] + s * d[1]))


def hull_mask(hull, xs, ys, dilate=1.0):
    """Boolean mask of grid cell centres (xs, ys) inside ``hull``.

    Degenerate hulls (fewer than 3 vertices) are drawn as a polyline dilated
    by ``dilate`` units.
    """
    X, Y = np.meshgrid(xs, ys)
    if len(hull) < 3:
        if len(hull) == 1:
            return np.hypot(X - hull[0][0], Y - hull[0][1]) <= dilate
        return _segment_distance(X, Y, hull[0], hull[1]) <= dilate
    inside = np.ones_like(X, dtype=bool)
    n = len(hull)
    for i in range(n):
        a, b = hull[i], hull[(i + 1) % n]
        inside &= (b[0] - a[0]) * (Y - a[1]) - (b[1] - a[1]) * (X - a[0]) >= 0
    return inside


def polygon_grid(hulls, resolution=256, pixel_size=None, dilate=1.0):
    """Cell-centre grid covering the union bounding box of ``hulls``."""
    allpts = np.concatenate([np.atleast_2d(h) for h in hulls])
    lo = allpts.min(axis=0) - dilate
    hi = allpts.max(axis=0) + dilate
    if pixel_size is None:
        pixel_size = float((hi - lo).max()) / resolution
    nx = max(1, int(np.ceil((hi[0] - lo[0]) / pixel_size)))
    ny = max(1, int(np.ceil((hi[1] - lo[1]) / pixel_size)))
    xs = lo[0] + (np.arange(nx) + 0.5) * pixel_size
    ys = lo[1] + (np.arange(ny) + 0.5) * pixel_size
    return xs, ys


def mask_iou(a, b):
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def polygon_iou(pts_a, pts_b, resolution=256, pixel_size=None, dilate=1.0):
    ha, hb = convex_hull(pts_a), convex_hull(pts_b)
    xs, ys = polygon_grid([ha, hb], resolution, pixel_size, dilate)
    return mask_iou(hull_mask(ha, xs, ys, dilate), hull_mask(hb, xs, ys, dilate))


def mouth_iou(pred, gt, mouth_idx=None, resolution=256, pixel_size=None):
    """Mean per-frame IoU of mouth regions (the MA score).

    Inputs are either landmark sequences (the convex hull of the mouth points
    is rasterized on a shared grid) or boolean masks of shape (T, H, W) / (H, W).
    """
    if isinstance(pred, LandmarkSequence) or (np.ndim(pred) == 3 and np.shape(pred)[-1] == 3
                                               and np.asarray(pred).dtype != bool):
        p, g = _pair(pred, gt)
        if mouth_idx is None:
            raise ValueError("mouth_idx is required for landmark input")
        idx = np.asarray(mouth_idx)
        return float(np.mean([polygon_iou(a[idx], b[idx], resolution, pixel_size)
                              for a, b in zip(p, g)]))
    a, b = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        return mask_iou(a, b)
    return float(np.mean([mask_iou(x, y) for x, y in zip(a, b)]))


# ---------------------------------------------------------------------------


@dataclass
class MetricReport:
    values: dict
    n_frames: int = 0
    n_clips: int = 0
    label: str = ""
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for k, v in self.values.items():
            if not np.isfinite(v):
                raise ValueError(f"metric {k} is not finite: {v}")

    def to_dict(self):
        return {"label": self.label, "n_clips": self.n_clips, "n_frames": self.n_frames,
                **{k: float(v) for k, v in self.values.items()}, **self.extra}

    @classmethod
    def mean(cls, reports, label=""):
        keys = reports[0].values.keys()
        vals = {k: float(np.mean([r.values[k] for r in reports])) for k in keys}
        return cls(vals, sum(r.n_frames for r in reports), len(reports), label)


def write_reports(rows, out_dir, stem="report"):
    """Write ``rows`` (list of dicts) as ``<stem>.json`` and a key=value ``<stem>.txt``."""
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = {"rows": rows}
    if rows:
        payload.update({k: v for k, v in rows[0].items() if isinstance(v, (int, float))})
    with open(out / f"{stem}.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
    lines = []
    for i, row in enumerate(rows):
        tag = row.get("label") or f"row{i}"
        for k, v in row.items():
            if k != "label":
                lines.append(f"{tag}.{k}={v}")
    with open(out / f"{stem}.txt", "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return out / f"{stem}.json"
