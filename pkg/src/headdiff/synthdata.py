"""Procedural talking-head clips with analytically known audio -> lip mapping.

A clip is built as: articulation signal a(t) in [0, 1] -> audio features
(fixed random linear map of [a, a'] plus noise) -> canonical landmarks (mouth
points open with a(t)) -> smooth head pose -> rendered flat-shaded face images.

Landmarks follow the 68-point layout (jaw 0-16, brows 17-26, nose 27-35,
eyes 36-47, outer lips 48-59, inner lips 60-67). Larger ``L`` appends rigid
filler points on the face surface.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .geometry import LandmarkSequence, RigidPose, apply_pose, canonicalize_sequence

MOUTH_IDX = np.arange(48, 68)
OUTER_LIP = np.arange(48, 60)
INNER_LIP = np.arange(60, 68)
UPPER_OUTER = np.arange(49, 54)
LOWER_OUTER = np.arange(55, 60)
UPPER_INNER = np.arange(61, 64)
LOWER_INNER = np.arange(65, 68)

LIP_COLOR = (0.75, 0.15, 0.2)
INTERIOR_COLOR = (0.22, 0.02, 0.06)
EYE_COLOR = (0.08, 0.08, 0.1)
BROW_COLOR = (0.3, 0.2, 0.1)

CLIP_FORMAT = "headdiff-clip/1"
DATASET_FORMAT = "headdiff-dataset/1"

# articulation frequencies (Hz), pairwise incommensurate
BASE_FREQS = np.array([1.0, np.sqrt(2.0), np.sqrt(5.0)]) * 1.2


class ClipFormatError(ValueError):
    pass


@dataclass
class GeneratorConfig:
    n_landmarks: int = 68
    audio_dim: int = 16
    n_frames: int = 100
    image_size: int = 64
    fps: float = 25.0
    seed: int = 0
    feature_seed: int = 1234
    articulation: str = "sines"  # "sines" | "zero"
    pose_wobble: float = 0.08  # radians
    audio_noise: float = 0.05
    mouth_amplitude: tuple = (0.22, 0.38)

    def __post_init__(self):
        if self.n_landmarks < 68:
            raise ValueError("the face template needs at least 68 landmarks")
        for name in ("audio_dim", "n_frames", "image_size", "fps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.articulation not in ("sines", "zero"):
            raise ValueError(f"unknown articulation family {self.articulation!r}")


@dataclass
class ClipDataset:
    images: np.ndarray  # (T, H, H, 3) float in [0, 1]
    landmarks: LandmarkSequence  # image space, pixels
    poses: list
    audio: np.ndarray  # (T, D_a)
    mouth_idx: np.ndarray
    articulation: np.ndarray  # (T,)
    seed: int = 0
    palette: dict = field(default_factory=dict)

    def __len__(self):
        return self.audio.shape[0]

    @property
    def fps(self):
        return self.landmarks.fps

    @property
    def image_size(self):
        return self.images.shape[1]

    def canonical_landmarks(self):
        return canonicalize_sequence(self.landmarks.points, self.poses)


# ---------------------------------------------------------------------------
# template and signals


def _ellipse(n, cx, cy, rx, ry, start=0.0):
    ang = start + 2 * np.pi * np.arange(n) / n
    return np.stack([cx + rx * np.cos(ang), cy + ry * np.sin(ang)], axis=1)


def face_template(rng, n_landmarks=68):
    """Identity-specific canonical template (L, 3) in face units, y pointing down."""
    sx, sy = rng.uniform(0.9, 1.1, size=2)
    eye_dx = rng.uniform(0.36, 0.44)
    mouth_w = rng.uniform(0.36, 0.46)
    pts = np.zeros((68, 2))
    k = np.arange(17)
    pts[0:17] = np.stack([-np.cos(np.pi * k / 16), 1.25 * np.sin(np.pi * k / 16)], axis=1)
    bx = np.linspace(0.15, 0.75, 5)
    pts[17:22] = np.stack([-bx[::-1], -0.55 - 0.06 * np.sin(np.pi * np.arange(5) / 4)], axis=1)
    pts[22:27] = np.stack([bx, -0.55 - 0.06 * np.sin(np.pi * np.arange(5) / 4)], axis=1)
    pts[27:31] = np.stack([np.zeros(4), np.linspace(-0.4, 0.05, 4)], axis=1)
    pts[31:36] = np.stack([np.linspace(-0.18, 0.18, 5), np.full(5, 0.15)], axis=1)
    pts[36:42] = _ellipse(6, -eye_dx, -0.3, 0.16, 0.07, np.pi)
    pts[42:48] = _ellipse(6, eye_dx, -0.3, 0.16, 0.07, np.pi)
    # outer lip: 48 left corner, 49-53 upper (left to right), 54 right corner, 55-59 lower
    ang = np.pi + np.pi * np.arange(12) / 6
    pts[48:60] = np.stack([mouth_w * np.cos(ang), 0.58 + 0.13 * np.sin(ang)], axis=1)
    ang = np.pi + np.pi * np.arange(8) / 4
    pts[60:68] = np.stack([0.75 * mouth_w * np.cos(ang), 0.58 + 0.01 * np.sin(ang)], axis=1)
    pts[:, 0] *= sx
    pts[:, 1] *= sy
    pts += rng.normal(scale=0.015, size=pts.shape)
    if n_landmarks > 68:
        extra = _filler_points(rng, n_landmarks - 68, sx, sy)
        pts = np.concatenate([pts, extra])
    z = 0.45 * np.clip(1 - pts[:, 0] ** 2 / 1.3 - pts[:, 1] ** 2 / 2.2, 0, None)
    z[27:31] += np.linspace(0.05, 0.2, 4)
    return np.concatenate([pts, z[:, None]], axis=1)


def _filler_points(rng, n, sx, sy):
    # rigid points on the cheeks/forehead, away from the mouth
    out = []
    while len(out) < n:
        x, y = rng.uniform(-0.9, 0.9), rng.uniform(-1.1, 0.3)
        if (x / 0.95) ** 2 + (y / 1.2) ** 2 < 1:
            out.append((x * sx, y * sy))
    return np.asarray(out)


def mouth_displacement(template, amplitude):
    """Per-point vertical displacement (L,) for unit articulation."""
    disp = np.zeros(len(template))
    cx = template[MOUTH_IDX, 0].mean()
    half = np.abs(template[48, 0] - cx) + 1e-9
    for idx, sign, gain in ((LOWER_OUTER, 1, 1.0), (LOWER_INNER, 1, 1.0),
                            (UPPER_OUTER, -1, 0.25), (UPPER_INNER, -1, 0.25)):
        taper = np.cos(0.5 * np.pi * np.clip(np.abs(template[idx, 0] - cx) / half, 0, 1)) ** 0.5
        disp[idx] = sign * gain * amplitude * taper
    return disp


def articulation_signal(n_frames, fps, rng, family="sines"):
    """Return (a, da/dt) with a in [0, 1]."""
    t = np.arange(n_frames) / fps
    if family == "zero":
        return np.zeros(n_frames), np.zeros(n_frames)
    freqs = BASE_FREQS * rng.uniform(0.85, 1.15)
    phases = rng.uniform(0, 2 * np.pi, size=3)
    arg = 2 * np.pi * freqs[None] * t[:, None] + phases[None]
    a = 0.5 + np.sin(arg).sum(axis=1) / 6.0
    da = (2 * np.pi * freqs[None] * np.cos(arg)).sum(axis=1) / 6.0
    return a, da


def audio_projection(audio_dim, feature_seed):
    """Dataset-wide fixed linear map from [a, a'/10, 1] to features."""
    rng = np.random.default_rng(feature_seed)
    return rng.normal(size=(audio_dim, 3))


def audio_features(a, da, audio_dim, feature_seed, noise, rng):
    basis = np.stack([a, da / 10.0, np.ones_like(a)], axis=1)
    feats = basis @ audio_projection(audio_dim, feature_seed).T
    return feats + rng.normal(scale=noise, size=feats.shape)


def pose_trajectory(n_frames, fps, image_size, wobble, rng):
    t = np.arange(n_frames) / fps
    freqs = rng.uniform(0.15, 0.45, size=6)
    phases = rng.uniform(0, 2 * np.pi, size=6)
    waves = np.sin(2 * np.pi * freqs[None] * t[:, None] + phases[None])
    scale = image_size * 0.3 * rng.uniform(0.95, 1.05)
    centre = np.array([image_size / 2, image_size * 0.48, 0.0])
    poses = []
    for w in waves:
        angles = wobble * np.array([w[0], 0.6 * w[1], 0.5 * w[2]])
        shift = np.array([0.03 * image_size * w[3], 0.02 * image_size * w[4], 0.0])
        poses.append(RigidPose.from_euler(angles, centre + shift, scale))
    return poses


# ---------------------------------------------------------------------------
# rendering


def random_palette(rng):
    skin = np.clip(np.array([0.85, 0.66, 0.52]) + rng.uniform(-0.1, 0.1, size=3), 0, 1)
    background = rng.uniform(0.15, 0.5, size=3) * np.array([0.6, 0.9, 1.0])
    return {"skin": skin.tolist(), "background": background.tolist(), "lip": list(LIP_COLOR),
            "interior": list(INTERIOR_COLOR), "eye": list(EYE_COLOR), "brow": list(BROW_COLOR)}


def _rgb(c):
    return tuple(int(round(255 * v)) for v in c)


def _xy(points):
    return [(float(x), float(y)) for x, y in points[:, :2]]


def forehead_arc(pose, template):
    k = np.linspace(0, np.pi, 9)
    top = template[:17, 0].max()
    arc = np.stack([top * np.cos(k), -1.35 * np.sin(k) * 0.95, np.zeros_like(k)], axis=1)
    return apply_pose(arc, pose)


def render_frame(points, palette, image_size, forehead=None):
    """Flat-shaded face for image-space landmarks ``points`` (L, 3); returns uint8 image."""
    img = Image.new("RGB", (image_size, image_size), _rgb(palette["background"]))
    draw = ImageDraw.Draw(img)
    outline = _xy(points[:17])
    if forehead is not None:
        outline = outline + _xy(forehead)
    draw.polygon(outline, fill=_rgb(palette["skin"]))
    draw.polygon(_xy(points[36:42]), fill=_rgb(palette["eye"]))
    draw.polygon(_xy(points[42:48]), fill=_rgb(palette["eye"]))
    draw.line(_xy(points[17:22]), fill=_rgb(palette["brow"]), width=1)
    draw.line(_xy(points[22:27]), fill=_rgb(palette["brow"]), width=1)
    draw.polygon(_xy(points[OUTER_LIP]), fill=_rgb(palette["lip"]))
    inner = points[INNER_LIP]
    if np.ptp(inner[:, 1]) > 0.5:
        draw.polygon(_xy(inner), fill=_rgb(palette["interior"]))
    return np.asarray(img, dtype=np.uint8)


def render_mouth_mask(points, image_size):
    """Ground-truth mouth pixel set: the filled outer-lip polygon (H, W) bool."""
    img = Image.new("L", (image_size, image_size), 0)
    ImageDraw.Draw(img).polygon(_xy(points[OUTER_LIP]), fill=255)
    return np.asarray(img) > 0


def mouth_mask_from_image(image, palette):
    """Classify pixels by nearest palette colour; mouth = lip or interior."""
    names = ["skin", "background", "lip", "interior", "eye", "brow"]
    cols = np.array([palette[n] for n in names], dtype=np.float64)
    img = np.asarray(image, dtype=np.float64)
    if img.max() > 1.0:
        img = img / 255.0
    d = ((img[..., None, :] - cols) ** 2).sum(-1)
    cls = d.argmin(-1)
    return (cls == 2) | (cls == 3)


# ---------------------------------------------------------------------------
# generation


def generate_clip(cfg: GeneratorConfig) -> ClipDataset:
    rng = np.random.default_rng(cfg.seed)
    template = face_template(rng, cfg.n_landmarks)
    amplitude = rng.uniform(*cfg.mouth_amplitude)
    disp = mouth_displacement(template, amplitude)
    a, da = articulation_signal(cfg.n_frames, cfg.fps, rng, cfg.articulation)
    audio = audio_features(a, da, cfg.audio_dim, cfg.feature_seed, cfg.audio_noise, rng)
    poses = pose_trajectory(cfg.n_frames, cfg.fps, cfg.image_size, cfg.pose_wobble, rng)
    palette = random_palette(rng)

    canonical = np.repeat(template[None], cfg.n_frames, axis=0)
    canonical[:, :, 1] += a[:, None] * disp[None]
    image_pts = np.stack([apply_pose(c, p) for c, p in zip(canonical, poses)])
    images = np.stack([
        render_frame(pts, palette, cfg.image_size, forehead_arc(p, template))
        for pts, p in zip(image_pts, poses)
    ])
    return ClipDataset(
        images=images.astype(np.float64) / 255.0,
        landmarks=LandmarkSequence(image_pts, cfg.fps),
        poses=poses,
        audio=audio,
        mouth_idx=MOUTH_IDX.copy(),
        articulation=a,
        seed=cfg.seed,
        palette=palette,
    )


# ---------------------------------------------------------------------------
# persistence


def _write_f32(path, arr):
    np.asarray(arr, dtype="<f4").tofile(path)


def _read_f32(path, shape, name):
    if not os.path.exists(path):
        raise ClipFormatError(f"missing file for field {name!r}: {path}")
    data = np.fromfile(path, dtype="<f4")
    expected = int(np.prod(shape))
    if data.size != expected:
        raise ClipFormatError(
            f"field {name!r}: {path} holds {data.size} floats, manifest implies {expected} {tuple(shape)}")
    return data.reshape(shape).astype(np.float64)


def save_clip(clip: ClipDataset, path):
    path = Path(path)
    (path / "frames").mkdir(parents=True, exist_ok=True)
    T, L = len(clip), clip.landmarks.n_landmarks
    manifest = {
        "format": CLIP_FORMAT,
        "T": T,
        "L": L,
        "audio_dim": int(clip.audio.shape[1]),
        "image_size": int(clip.image_size),
        "fps": float(clip.fps),
        "mouth_idx": [int(i) for i in clip.mouth_idx],
        "seed": int(clip.seed),
        "palette": clip.palette,
    }
    with open(path / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    _write_f32(path / "landmarks.bin", clip.landmarks.points)
    _write_f32(path / "audio.bin", clip.audio)
    _write_f32(path / "poses.bin", np.stack([p.as_array() for p in clip.poses]))
    _write_f32(path / "articulation.bin", clip.articulation)
    for i, img in enumerate(clip.images):
        save_png(img, path / "frames" / f"{i:06d}.png")
    return path


def save_png(img, path):
    arr = np.asarray(img)
    if arr.dtype != np.uint8:
        arr = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, "RGB").save(path, optimize=False)


def load_png(path):
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


def load_clip(path) -> ClipDataset:
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.exists():
        raise ClipFormatError(f"missing manifest: {mpath}")
    with open(mpath) as fh:
        m = json.load(fh)
    for key in ("T", "L", "audio_dim", "image_size", "fps", "mouth_idx"):
        if key not in m:
            raise ClipFormatError(f"manifest missing field {key!r}")
    T, L = m["T"], m["L"]
    landmarks = _read_f32(path / "landmarks.bin", (T, L, 3), "landmarks")
    audio = _read_f32(path / "audio.bin", (T, m["audio_dim"]), "audio")
    pose_arr = _read_f32(path / "poses.bin", (T, 13), "poses")
    art_path = path / "articulation.bin"
    articulation = _read_f32(art_path, (T,), "articulation") if art_path.exists() else np.full(T, np.nan)
    frames = sorted((path / "frames").glob("*.png"))
    if len(frames) != T:
        raise ClipFormatError(f"field 'frames': found {len(frames)} PNGs, manifest says T={T}")
    images = np.stack([load_png(f) for f in frames])
    H = m["image_size"]
    if images.shape[1:] != (H, H, 3):
        raise ClipFormatError(f"field 'frames': image shape {images.shape[1:]} != ({H}, {H}, 3)")
    mouth_idx = np.asarray(m["mouth_idx"], dtype=np.int64)
    if mouth_idx.size and (mouth_idx.min() < 0 or mouth_idx.max() >= L):
        raise ClipFormatError("field 'mouth_idx': indices out of range")
    # float32 storage: re-orthonormalize rotations before validation
    poses = [_pose_from_f32(row) for row in pose_arr]
    return ClipDataset(images, LandmarkSequence(landmarks, m["fps"]), poses, audio, mouth_idx,
                       articulation, m.get("seed", 0), m.get("palette", {}))


def _pose_from_f32(row):
    rot = row[:9].reshape(3, 3)
    u, _, vt = np.linalg.svd(rot)
    return RigidPose(u @ vt, row[9:12], row[12])


def generate_dataset(out_dir, n_clips, cfg: GeneratorConfig):
    """Write ``n_clips`` clips (seeds ``cfg.seed + i``) and a dataset manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = []
    for i in range(n_clips):
        clip_cfg = GeneratorConfig(**{**asdict(cfg), "seed": cfg.seed + i})
        name = f"clip_{i:04d}"
        save_clip(generate_clip(clip_cfg), out_dir / name)
        names.append(name)
    manifest = {"format": DATASET_FORMAT, "clips": names, "generator": asdict(cfg)}
    with open(out_dir / "dataset.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return names


def load_dataset(path):
    """Load every clip listed in ``dataset.json`` (or every clip subdirectory)."""
    path = Path(path)
    if (path / "manifest.json").exists():
        return [load_clip(path)]
    index = path / "dataset.json"
    if index.exists():
        with open(index) as fh:
            names = json.load(fh)["clips"]
    else:
        names = sorted(p.name for p in path.iterdir() if (p / "manifest.json").exists())
    return [load_clip(path / n) for n in names]
