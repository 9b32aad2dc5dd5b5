"""Landmark-to-image diffusion: condition images, latent codec and the conditional U-net.

Images are ``(H, W, 3)`` float arrays in [0, 1]. Latents are ``(h, w, C_z)``
numpy arrays, or ``(B, C_z, h, w)`` tensors inside the network.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted
from torch import nn
from torch.nn import functional as F

from . import ddpm
from .nn_utils import (
    TimestepEmbedding,
    load_module_arrays,
    load_npz,
    load_optimizer_arrays,
    module_arrays,
    optimizer_arrays,
    save_npz,
)
from .validation import EmptyInputError, ShapeError, check_image, check_random_state

CONDITION_NAMES = ("masked_target", "target_landmarks", "reference", "reference_landmarks")

# condition sets zeroed for each ablation
ABLATIONS = {
    "full": (),
    "wo_ref_pair": ("reference_landmarks", "reference"),
    "wo_refP_masked": ("reference_landmarks", "masked_target"),
    "wo_refP": ("reference_landmarks",),
    "unconditional": CONDITION_NAMES,
}


# ---------------------------------------------------------------------------
# condition images


class Camera(NamedTuple):
    """Orthographic camera: pixel = scale * (x, y) + offset."""

    scale: float = 1.0
    offset: tuple = (0.0, 0.0)


def disc_radius(size):
    return max(1, int(round(size / 64)))


def rasterize_landmarks(frame, size, camera=Camera(), mouth_idx=(), radius=None,
                        return_diagnostics=False):
    """Draw landmarks as filled discs on a black ``size x size`` canvas.

    Mouth points go to channel 2, all others to channel 1. Points whose centre
    falls outside the canvas are skipped and counted in ``diagnostics["clipped"]``.
    """
    pts = np.asarray(frame, dtype=np.float64)
    r = disc_radius(size) if radius is None else radius
    xy = camera.scale * pts[:, :2] + np.asarray(camera.offset)
    img = np.zeros((size, size, 3))
    mouth = np.zeros(len(pts), dtype=bool)
    mouth[np.asarray(mouth_idx, dtype=np.int64)] = True
    inside = np.all((xy >= -0.5) & (xy < size - 0.5), axis=1)
    rows, cols = np.mgrid[0:size, 0:size]
    for (x, y), is_mouth, ok in zip(xy, mouth, inside):
        if not ok:
            continue
        lo_r, hi_r = max(0, int(np.floor(y - r))), min(size, int(np.ceil(y + r)) + 1)
        lo_c, hi_c = max(0, int(np.floor(x - r))), min(size, int(np.ceil(x + r)) + 1)
        rr, cc = rows[lo_r:hi_r, lo_c:hi_c], cols[lo_r:hi_r, lo_c:hi_c]
        disc = (cc - x) ** 2 + (rr - y) ** 2 <= r * r
        img[lo_r:hi_r, lo_c:hi_c, 2 if is_mouth else 1][disc] = 1.0
    if return_diagnostics:
        return img, {"clipped": int((~inside).sum())}
    return img


def mouth_mask(frame, size, margin=2):
    """Lower half of the landmark bounding box, dilated by ``margin`` pixels."""
    pts = np.asarray(frame, dtype=np.float64)[:, :2]
    rows, cols = np.mgrid[0:size, 0:size]
    x0, y0 = pts.min(axis=0)
    x1, y1 = pts.max(axis=0)
    if not (x1 - x0 > 1e-9 and y1 - y0 > 1e-9):
        return rows >= size / 2
    ymid = 0.5 * (y0 + y1)
    return ((cols >= x0 - margin) & (cols <= x1 + margin)
            & (rows >= ymid - margin) & (rows <= y1 + margin))


def mask_mouth_region(img, frame, margin=2, return_mask=False):
    img = check_image(img)
    mask = mouth_mask(frame, img.shape[0], margin)
    out = img.copy()
    out[mask] = 0
    return (out, mask) if return_mask else out


def composite(generated, source, mask):
    """Take masked pixels from ``generated`` and everything else verbatim from ``source``."""
    return np.where(np.asarray(mask)[..., None], np.clip(generated, 0, 1), source)


# ---------------------------------------------------------------------------
# latent codec


def encode(img, factor=4):
    """Space-to-depth: each f x f x 3 patch becomes one latent pixel, scaled to [-1, 1]."""
    arr = check_image(img, factor)
    h, w = arr.shape[0] // factor, arr.shape[1] // factor
    z = arr.reshape(h, factor, w, factor, 3).transpose(0, 2, 1, 3, 4).reshape(h, w, -1)
    return 2.0 * z - 1.0


def decode(lat, factor=4):
    z = np.asarray(lat, dtype=np.float64)
    if z.ndim != 3 or z.shape[2] != 3 * factor * factor:
        raise ShapeError(f"latent must have shape (h, w, {3 * factor * factor}), got {z.shape}")
    h, w = z.shape[:2]
    img = ((z + 1.0) / 2.0).reshape(h, w, factor, factor, 3).transpose(0, 2, 1, 3, 4)
    return img.reshape(h * factor, w * factor, 3)


class PatchCodec(TransformerMixin, BaseEstimator):
    """Image <-> latent transform.

    ``mode="fixed"`` is the exact space-to-depth codec and needs no fitting.
    ``mode="pca"`` learns an orthogonal basis over patches from training images;
    with ``n_components`` below ``3 f^2`` it is lossy.
    """

    def __init__(self, factor=4, mode="fixed", n_components=None):
        self.factor = factor
        self.mode = mode
        self.n_components = n_components

    @property
    def latent_channels(self):
        if self.mode == "pca" and self.n_components:
            return self.n_components
        return 3 * self.factor ** 2

    def fit(self, X, y=None):
        if self.mode == "fixed":
            self.fitted_ = True
            return self
        if self.mode != "pca":
            raise ValueError(f"unknown codec mode {self.mode!r}")
        c = 3 * self.factor ** 2
        patches = np.concatenate([encode(im, self.factor).reshape(-1, c) for im in X])
        self.mean_ = patches.mean(axis=0)
        _, _, vt = np.linalg.svd(patches - self.mean_, full_matrices=False)
        self.components_ = vt[: self.n_components or c]
        self.fitted_ = True
        return self

    def transform(self, X):
        check_is_fitted(self, "fitted_")
        z = np.stack([encode(im, self.factor) for im in X])
        if self.mode == "pca":
            z = (z - self.mean_) @ self.components_.T
        return z

    def inverse_transform(self, Z):
        check_is_fitted(self, "fitted_")
        Z = np.asarray(Z, dtype=np.float64)
        if self.mode == "pca":
            Z = Z @ self.components_ + self.mean_
        return np.stack([decode(z, self.factor) for z in Z])


# ---------------------------------------------------------------------------
# conditioning


class L2ICondition(NamedTuple):
    masked_target: torch.Tensor  # (B, C_z, h, w)
    target_landmarks: torch.Tensor
    reference: torch.Tensor
    reference_landmarks: torch.Tensor

    def drop(self, names):
        """Zero the named conditions, keeping shapes (used for ablations)."""
        return L2ICondition(*[torch.zeros_like(v) if n in names else v
                              for n, v in zip(CONDITION_NAMES, self)])


def select_reference(clip, i, tau=20, mode="train"):
    """Reference frame index, image and ground-truth landmarks for target frame ``i``."""
    n = len(clip)
    if n == 0:
        raise EmptyInputError("clip has no frames")
    if mode == "train":
        j = max(int(i) - int(tau), 0)
    elif mode == "infer":
        j = 0
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return j, clip.images[j], clip.landmarks.points[j]


def to_channels_first(z):
    """(..., h, w, C) numpy latents -> (B, C, h, w) float32 tensor."""
    t = torch.as_tensor(np.asarray(z), dtype=torch.float32)
    if t.ndim == 3:
        t = t[None]
    return t.permute(0, 3, 1, 2).contiguous()


def to_channels_last(t):
    return t.detach().permute(0, 2, 3, 1).cpu().numpy().astype(np.float64)


def build_condition(codec, masked_target, target_lmk_img, ref_img, ref_lmk_img):
    """Encode the four condition images (each (n, H, W, 3)) into a batched condition."""
    return L2ICondition(*[to_channels_first(codec.transform(np.asarray(x)))
                          for x in (masked_target, target_lmk_img, ref_img, ref_lmk_img)])


# ---------------------------------------------------------------------------
# network


def _groups(ch):
    return math.gcd(8, ch)


class ResBlock(nn.Module):
    def __init__(self, cin, cout, tdim):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(tdim, cout)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class SelfAttention2d(nn.Module):
    """Single-head self-attention over spatial positions, with residual."""

    def __init__(self, ch, size=None, pos_emb=True):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(ch), ch)
        self.qkv = nn.Conv2d(ch, 3 * ch, 1)
        self.proj = nn.Conv2d(ch, ch, 1)
        self.pos = nn.Parameter(torch.zeros(1, ch, size, size)) if pos_emb and size else None

    def forward(self, x):
        b, c, h, w = x.shape
        hx = self.norm(x)
        if self.pos is not None:
            hx = hx + self.pos
        q, k, v = self.qkv(hx).reshape(b, 3, c, h * w).unbind(1)
        attn = torch.softmax(torch.einsum("bci,bcj->bij", q, k) / math.sqrt(c), dim=-1)
        out = torch.einsum("bij,bcj->bci", attn, v).reshape(b, c, h, w)
        return x + self.proj(out)


class L2INet(nn.Module):
    """Two-level U-net with a self-attention stage at the bottleneck."""

    def __init__(self, latent_channels=48, latent_size=16, base_width=32, pos_emb=True):
        super().__init__()
        if latent_size % 2:
            raise ShapeError("latent size must be even for the two-level U-net")
        w = base_width
        tdim = 4 * w
        self.latent_channels = latent_channels
        self.time = nn.Sequential(TimestepEmbedding(w, tdim), nn.SiLU(), nn.Linear(tdim, tdim))
        self.inp = nn.Conv2d(5 * latent_channels, w, 3, padding=1)
        self.down0 = ResBlock(w, w, tdim)
        self.downsample = nn.Conv2d(w, w, 3, stride=2, padding=1)
        self.down1 = ResBlock(w, 2 * w, tdim)
        self.mid1 = ResBlock(2 * w, 2 * w, tdim)
        self.attn = SelfAttention2d(2 * w, latent_size // 2, pos_emb)
        self.mid2 = ResBlock(2 * w, 2 * w, tdim)
        self.up1 = ResBlock(4 * w, 2 * w, tdim)
        self.upconv = nn.Conv2d(2 * w, 2 * w, 3, padding=1)
        self.up0 = ResBlock(3 * w, w, tdim)
        self.out_norm = nn.GroupNorm(_groups(w), w)
        self.out = nn.Conv2d(w, latent_channels, 3, padding=1)

    def forward(self, z_t, t, cond: L2ICondition):
        x = torch.cat([z_t, *cond], dim=1)
        if x.shape[1] != self.inp.in_channels:
            raise ShapeError(f"expected {self.inp.in_channels} input channels, got {x.shape[1]}")
        temb = self.time(torch.as_tensor(t).reshape(-1))
        if temb.shape[0] == 1 and z_t.shape[0] > 1:
            temb = temb.expand(z_t.shape[0], -1)
        h0 = self.down0(self.inp(x), temb)
        h1 = self.down1(self.downsample(h0), temb)
        m = self.mid2(self.attn(self.mid1(h1, temb)), temb)
        u1 = self.up1(torch.cat([m, h1], dim=1), temb)
        u0 = self.upconv(F.interpolate(u1, scale_factor=2, mode="nearest"))
        u0 = self.up0(torch.cat([u0, h0], dim=1), temb)
        return self.out(F.silu(self.out_norm(u0)))


def predict_noise(net: L2INet, z_t, t, cond: L2ICondition):
    single = z_t.ndim == 3
    if single:
        z_t = z_t[None]
        cond = L2ICondition(*[c[None] for c in cond])
    out = net(z_t, torch.as_tensor(t, dtype=torch.long).reshape(-1), cond)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# estimator


class L2IDiffusion(BaseEstimator):
    """Latent diffusion over face images, conditioned on the four condition images.

    ``drop_conditions`` zeroes the named latent conditions during training and
    sampling, so ablations share the architecture of the full model.
    """

    def __init__(self, image_size=64, factor=4, base_width=32, pos_emb=True, codec="fixed",
                 drop_conditions=(), tau=20, mask_margin=2, n_timesteps=1000, beta_start=1e-4,
                 beta_end=0.02, variance="posterior", loss="l2", learning_rate=1e-4,
                 batch_size=16, n_steps=2000, sample_stride=1, clip_denoised=True,
                 random_state=None):
        self.image_size = image_size
        self.factor = factor
        self.base_width = base_width
        self.pos_emb = pos_emb
        self.codec = codec
        self.drop_conditions = drop_conditions
        self.tau = tau
        self.mask_margin = mask_margin
        self.n_timesteps = n_timesteps
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.variance = variance
        self.loss = loss
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.n_steps = n_steps
        self.sample_stride = sample_stride
        self.clip_denoised = clip_denoised
        self.random_state = random_state

    def initialize(self):
        unknown = set(self.drop_conditions) - set(CONDITION_NAMES)
        if unknown:
            raise ValueError(f"unknown conditions to drop: {sorted(unknown)}")
        if self.image_size % (2 * self.factor):
            raise ShapeError("image_size must be divisible by 2 * factor")
        seed = int(check_random_state(self.random_state).integers(2**31))
        torch.manual_seed(seed)
        self.codec_ = PatchCodec(self.factor, self.codec)
        if self.codec == "fixed":
            self.codec_.fit([])
        self.latent_size_ = self.image_size // self.factor
        self.model_ = L2INet(self.codec_.latent_channels, self.latent_size_, self.base_width,
                             self.pos_emb)
        self.schedule_ = ddpm.make_linear_schedule(self.n_timesteps, self.beta_start,
                                                   self.beta_end, self.variance)
        self.optimizer_ = torch.optim.Adam(self.model_.parameters(), lr=self.learning_rate)
        self.generator_ = torch.Generator().manual_seed(seed)
        self.rng_ = np.random.default_rng(seed)
        self.step_ = 0
        self.loss_history_ = []
        return self

    def condition_images(self, clip, i, ref_index, landmarks=None, ref_landmarks=None):
        """The four condition images for frame ``i`` of ``clip``.

        ``landmarks`` overrides the target frame landmarks (inference passes
        predicted ones); ``ref_landmarks`` likewise for the reference frame.
        """
        size = clip.image_size
        target_pts = clip.landmarks.points[i] if landmarks is None else landmarks
        ref_pts = clip.landmarks.points[ref_index] if ref_landmarks is None else ref_landmarks
        masked = mask_mouth_region(clip.images[i], target_pts, self.mask_margin)
        return (masked,
                rasterize_landmarks(target_pts, size, mouth_idx=clip.mouth_idx),
                clip.images[ref_index],
                rasterize_landmarks(ref_pts, size, mouth_idx=clip.mouth_idx))

    def set_data(self, clips):
        if not clips:
            raise ValueError("need at least one clip")
        for c in clips:
            if c.image_size != self.image_size:
                raise ShapeError(f"clip image size {c.image_size} != estimator image_size {self.image_size}")
        if not hasattr(self.codec_, "fitted_"):
            self.codec_.fit([im for c in clips for im in c.images])
        self.data_ = []
        for c in clips:
            lmk_imgs = np.stack([rasterize_landmarks(p, c.image_size, mouth_idx=c.mouth_idx)
                                 for p in c.landmarks.points])
            masked = np.stack([mask_mouth_region(im, p, self.mask_margin)
                               for im, p in zip(c.images, c.landmarks.points)])
            self.data_.append(tuple(self.codec_.transform(x).astype(np.float32)
                                    for x in (c.images, masked, lmk_imgs)))
        return self

    def sample_batch(self, rng=None):
        rng = self.rng_ if rng is None else rng
        x0, parts = [], [[], [], [], []]
        for _ in range(self.batch_size):
            z_img, z_mask, z_lmk = self.data_[rng.integers(len(self.data_))]
            i = int(rng.integers(len(z_img)))
            j = max(i - self.tau, 0)
            x0.append(z_img[i])
            for lst, v in zip(parts, (z_mask[i], z_lmk[i], z_img[j], z_lmk[j])):
                lst.append(v)
        cond = L2ICondition(*[to_channels_first(np.stack(p)) for p in parts])
        return to_channels_first(np.stack(x0)), cond.drop(self.drop_conditions)

    def train_step(self):
        x0, cond = self.sample_batch()
        self.model_.train()
        self.optimizer_.zero_grad()
        loss = ddpm.training_loss(self.model_, x0, cond, self.schedule_, self.generator_, self.loss)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"non-finite L2I loss at step {self.step_}")
        loss.backward()
        self.optimizer_.step()
        self.step_ += 1
        value = float(loss.detach())
        self.loss_history_.append(value)
        return value

    def fit(self, clips, y=None):
        self.initialize()
        self.set_data(clips)
        for _ in range(self.n_steps):
            self.train_step()
        return self

    @torch.no_grad()
    def sample_latents(self, cond: L2ICondition, generator=None):
        check_is_fitted(self, "model_")
        cond = cond.drop(self.drop_conditions)
        n = cond.masked_target.shape[0]
        shape = (n, self.codec_.latent_channels, self.latent_size_, self.latent_size_)
        self.model_.eval()
        gen = generator if generator is not None else torch.Generator().manual_seed(0)
        return ddpm.sample(self.model_, shape, cond, self.schedule_, gen, self.sample_stride,
                           clip_range=self.clip_range())

    def clip_range(self):
        """Bounds for the x0 estimate while sampling; pixel latents live in [-1, 1]."""
        return (-1.0, 1.0) if self.clip_denoised and self.codec == "fixed" else None

    def predict(self, condition_images, generator=None):
        """Decode sampled images for batched condition images (each (n, H, W, 3))."""
        cond = build_condition(self.codec_, *condition_images)
        z = self.sample_latents(cond, generator)
        return np.clip(self.codec_.inverse_transform(to_channels_last(z)), 0, 1)

    def generate_frames(self, clip, indices, landmarks=None, ref_index=0, generator=None,
                        ref_landmarks=None):
        """Composited frames for ``indices`` of ``clip`` (mouth region generated)."""
        conds, masks = [[], [], [], []], []
        for k, i in enumerate(indices):
            pts = None if landmarks is None else landmarks[k]
            imgs = self.condition_images(clip, i, ref_index, pts, ref_landmarks)
            for lst, v in zip(conds, imgs):
                lst.append(v)
            target = clip.landmarks.points[i] if pts is None else pts
            masks.append(mouth_mask(target, clip.image_size, self.mask_margin))
        gen = self.predict([np.stack(c) for c in conds], generator)
        return np.stack([composite(g, clip.images[i], m) for g, i, m in zip(gen, indices, masks)])

    # -- persistence -------------------------------------------------------
    def state_arrays(self, prefix="l2i/"):
        arrays = module_arrays(self.model_, prefix + "model/")
        arrays.update(optimizer_arrays(self.optimizer_, prefix + "optim/"))
        arrays[prefix + "generator"] = self.generator_.get_state().numpy().copy()
        arrays[prefix + "loss_history"] = np.asarray(self.loss_history_, dtype=np.float64)
        if self.codec == "pca":
            arrays[prefix + "codec/mean"] = self.codec_.mean_
            arrays[prefix + "codec/components"] = self.codec_.components_
        return arrays

    def load_state_arrays(self, arrays, rng_state=None, step=0, prefix="l2i/"):
        self.initialize()
        if self.codec == "pca":
            self.codec_.mean_ = np.array(arrays[prefix + "codec/mean"])
            self.codec_.components_ = np.array(arrays[prefix + "codec/components"])
            self.codec_.fitted_ = True
        load_module_arrays(self.model_, arrays, prefix + "model/")
        load_optimizer_arrays(self.optimizer_, arrays, prefix + "optim/")
        self.generator_.set_state(torch.from_numpy(np.array(arrays[prefix + "generator"])))
        self.loss_history_ = list(np.asarray(arrays[prefix + "loss_history"]))
        if rng_state is not None:
            self.rng_.bit_generator.state = rng_state
        self.step_ = step
        return self

    def save(self, path):
        params = self.get_params()
        params["drop_conditions"] = list(params["drop_conditions"])
        config = {"kind": "l2i", "params": params, "step": self.step_,
                  "rng_state": self.rng_.bit_generator.state}
        save_npz(path, config, self.state_arrays())

    @classmethod
    def load(cls, path):
        config, arrays = load_npz(path)
        params = dict(config["params"])
        params["drop_conditions"] = tuple(params["drop_conditions"])
        est = cls(**params)
        return est.load_state_arrays(arrays, config["rng_state"], config["step"])


def generate_frame(estimator: L2IDiffusion, cond: L2ICondition, source_image, mask, generator=None):
    """Sample one frame and paste it into ``source_image`` inside ``mask``."""
    z = estimator.sample_latents(cond, generator)
    img = np.clip(estimator.codec_.inverse_transform(to_channels_last(z))[0], 0, 1)
    return composite(img, source_image, mask)
