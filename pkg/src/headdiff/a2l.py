"""Audio-to-landmark denoiser: condition fusion, temporal blocks, projection out.

The diffusion state is a window of ``l`` normalized canonical landmark frames,
flattened to ``(l, 3L)``. Conditions are the audio window ``(l, D_a)`` and the
raw canonical mean landmarks ``(3L,)`` of the video.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted
from torch import nn
from torch.nn import functional as F

from . import ddpm
from .geometry import LandmarkSequence, compute_stats, normalize
from .nn_utils import (
    TimestepEmbedding,
    load_module_arrays,
    load_npz,
    load_optimizer_arrays,
    module_arrays,
    optimizer_arrays,
    save_npz,
)
from .validation import ShapeError, check_random_state


class A2LCondition(NamedTuple):
    audio: torch.Tensor  # (B, l, D_a)
    mean_landmarks: torch.Tensor  # (B, 3L)


class TemporalBlock(nn.Module):
    """Temporal unit (norm, conv over frames, ReLU) then mapping unit (norm, linear, ReLU)."""

    def __init__(self, dim, kernel_size=3, temporal_unit=True, mapping_unit=True, residual=True):
        super().__init__()
        if kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd for same-length padding")
        self.temporal_unit = temporal_unit
        self.mapping_unit = mapping_unit
        self.residual = residual
        if temporal_unit:
            self.tu_norm = nn.LayerNorm(dim)
            self.tu_conv = nn.Conv1d(dim, dim, kernel_size, padding=kernel_size // 2)
        if mapping_unit:
            self.mu_norm = nn.LayerNorm(dim)
            self.mu_fc = nn.Linear(dim, dim)

    def forward(self, x):
        # x: (B, l, D)
        h = x
        if self.temporal_unit:
            h = self.tu_conv(self.tu_norm(h).transpose(1, 2)).transpose(1, 2)
            h = F.relu(h)
        if self.mapping_unit:
            h = F.relu(self.mu_fc(self.mu_norm(h)))
        return x + h if self.residual else h


class A2LNet(nn.Module):
    def __init__(self, n_landmarks=68, audio_dim=16, hidden_dim=128, n_blocks=12, window=20,
                 kernel_size=3, temporal_unit=True, mapping_unit=True, residual=True):
        super().__init__()
        self.n_landmarks = n_landmarks
        self.audio_dim = audio_dim
        self.window = window
        d_p = 3 * n_landmarks
        self.f_audio = nn.Linear(audio_dim, hidden_dim)
        self.f_mean = nn.Linear(d_p, hidden_dim)
        self.f_points = nn.Linear(d_p, hidden_dim)
        self.f_time = TimestepEmbedding(hidden_dim)
        self.f_agg = nn.Linear(2 * hidden_dim, hidden_dim)
        self.blocks = nn.ModuleList(
            TemporalBlock(hidden_dim, kernel_size, temporal_unit, mapping_unit, residual)
            for _ in range(n_blocks)
        )
        self.proj_out = nn.Linear(hidden_dim, d_p)

    def fuse(self, x_t, t, cond: A2LCondition):
        b, l, _ = x_t.shape
        h_time = self.f_time(t).expand(b, -1) if torch.as_tensor(t).numel() == 1 else self.f_time(t)
        h_pts = self.f_points(x_t)
        h_agg = self.f_agg(torch.cat([h_pts, h_time[:, None, :].expand(b, l, -1)], dim=-1))
        return self.f_audio(cond.audio) + self.f_mean(cond.mean_landmarks)[:, None, :] + h_agg

    def forward(self, x_t, t, cond: A2LCondition):
        d_p = 3 * self.n_landmarks
        if x_t.ndim != 3 or x_t.shape[-1] != d_p:
            raise ShapeError(f"x_t must be (B, l, {d_p}), got {tuple(x_t.shape)}")
        if cond.audio.shape[:2] != x_t.shape[:2] or cond.audio.shape[-1] != self.audio_dim:
            raise ShapeError(f"audio window shape {tuple(cond.audio.shape)} incompatible with x_t")
        if cond.mean_landmarks.shape[-1] != d_p:
            raise ShapeError("mean landmarks must have 3L entries")
        h = self.fuse(x_t, t, cond)
        for block in self.blocks:
            h = block(h)
        return self.proj_out(h)


def _as_batched(x_t, t, cond):
    """Promote single-window inputs to a batch of one."""
    x_t = torch.as_tensor(x_t)
    audio = torch.as_tensor(cond.audio, dtype=x_t.dtype)
    mean = torch.as_tensor(cond.mean_landmarks, dtype=x_t.dtype).reshape(*audio.shape[:-2], -1)
    single = x_t.ndim == 2
    if single:
        x_t, audio, mean = x_t[None], audio[None], mean[None]
    t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
    if t.numel() == 1:
        t = t.expand(x_t.shape[0])
    return x_t, t, A2LCondition(audio, mean), single


def fuse_conditions(net: A2LNet, audio_window, mean_landmarks, x_t, t):
    """Fused features ``f_A(A) + f_mean(P) + f_agg(f_P(x_t) ++ f_t(t))``, shape (l, D_h)."""
    x, tt, cond, single = _as_batched(x_t, t, A2LCondition(audio_window, mean_landmarks))
    out = net.fuse(x, tt, cond)
    return out[0] if single else out


def temporal_block(block: TemporalBlock, x):
    x = torch.as_tensor(x)
    return block(x[None])[0] if x.ndim == 2 else block(x)


def predict_noise(net: A2LNet, x_t, t, cond):
    x, tt, c, single = _as_batched(x_t, t, cond)
    out = net(x, tt, c)
    return out[0] if single else out


def generate_landmarks(net: A2LNet, cond, sched, generator=None, stride=1):
    """Sample one normalized canonical window; returns a LandmarkSequence of length l."""
    audio = torch.as_tensor(cond.audio, dtype=torch.float32)
    mean = torch.as_tensor(cond.mean_landmarks, dtype=torch.float32).reshape(1, -1)
    batched = A2LCondition(audio[None], mean)
    l = audio.shape[0]
    x = ddpm.sample(net, (1, l, 3 * net.n_landmarks), batched, sched, generator, stride)
    return LandmarkSequence(x[0].numpy().astype(np.float64).reshape(l, net.n_landmarks, 3))


@torch.no_grad()
def regress_landmarks(net: A2LNet, cond):
    """Direct prediction baseline: one forward pass from zeroed state at t = 0."""
    audio = torch.as_tensor(cond.audio, dtype=torch.float32)
    mean = torch.as_tensor(cond.mean_landmarks, dtype=torch.float32).reshape(1, -1)
    l = audio.shape[0]
    x = torch.zeros(1, l, 3 * net.n_landmarks)
    out = net(x, torch.zeros(1, dtype=torch.long), A2LCondition(audio[None], mean))
    return LandmarkSequence(out[0].numpy().astype(np.float64).reshape(l, net.n_landmarks, 3))


class A2LDiffusion(BaseEstimator):
    """Audio-to-landmark diffusion estimator.

    ``fit(audio, landmarks)`` takes per-clip audio feature arrays ``(T_i, D_a)``
    and canonical landmark arrays ``(T_i, L, 3)``. Windows of ``window`` frames
    are drawn at random; each clip is normalized by its own statistics.

    ``objective="regression"`` trains the same network to output the clean
    window directly (the no-diffusion ablation).
    """

    def __init__(self, n_landmarks=68, audio_dim=16, hidden_dim=128, n_blocks=12, window=20,
                 kernel_size=3, temporal_unit=True, mapping_unit=True, residual=True,
                 objective="diffusion", n_timesteps=1000, beta_start=1e-4, beta_end=0.02,
                 variance="posterior", loss="l2", learning_rate=1e-4, batch_size=16,
                 n_steps=2000, sample_stride=1, random_state=None):
        self.n_landmarks = n_landmarks
        self.audio_dim = audio_dim
        self.hidden_dim = hidden_dim
        self.n_blocks = n_blocks
        self.window = window
        self.kernel_size = kernel_size
        self.temporal_unit = temporal_unit
        self.mapping_unit = mapping_unit
        self.residual = residual
        self.objective = objective
        self.n_timesteps = n_timesteps
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.variance = variance
        self.loss = loss
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.n_steps = n_steps
        self.sample_stride = sample_stride
        self.random_state = random_state

    # -- setup -------------------------------------------------------------
    def initialize(self):
        if self.objective not in ("diffusion", "regression"):
            raise ValueError(f"unknown objective {self.objective!r}")
        seed = int(check_random_state(self.random_state).integers(2**31))
        torch.manual_seed(seed)
        self.model_ = A2LNet(self.n_landmarks, self.audio_dim, self.hidden_dim, self.n_blocks,
                             self.window, self.kernel_size, self.temporal_unit,
                             self.mapping_unit, self.residual)
        self.schedule_ = ddpm.make_linear_schedule(self.n_timesteps, self.beta_start,
                                                   self.beta_end, self.variance)
        self.optimizer_ = torch.optim.Adam(self.model_.parameters(), lr=self.learning_rate)
        self.generator_ = torch.Generator().manual_seed(seed)
        self.rng_ = np.random.default_rng(seed)
        self.step_ = 0
        self.loss_history_ = []
        return self

    def set_data(self, audio, landmarks):
        """Store per-clip normalized windows source; ``landmarks`` are canonical."""
        if len(audio) != len(landmarks) or not audio:
            raise ValueError("need matching, non-empty lists of audio and landmark arrays")
        self.data_ = []
        for a, p in zip(audio, landmarks):
            a = np.asarray(a, dtype=np.float64)
            p = np.asarray(p, dtype=np.float64)
            if a.shape[0] != p.shape[0]:
                raise ShapeError("audio and landmarks must have the same number of frames")
            if a.shape[0] < self.window:
                raise ShapeError(f"clip of {a.shape[0]} frames shorter than window {self.window}")
            if a.shape[1] != self.audio_dim or p.shape[1] != self.n_landmarks:
                raise ShapeError("clip dims do not match estimator configuration")
            stats = compute_stats(p)
            self.data_.append((a, normalize(p, stats).reshape(len(p), -1), stats.mean.ravel()))
        return self

    def sample_batch(self, rng=None):
        rng = self.rng_ if rng is None else rng
        xs, auds, means = [], [], []
        for _ in range(self.batch_size):
            a, x, m = self.data_[rng.integers(len(self.data_))]
            s = rng.integers(0, len(a) - self.window + 1)
            xs.append(x[s:s + self.window])
            auds.append(a[s:s + self.window])
            means.append(m)
        cond = A2LCondition(torch.tensor(np.stack(auds), dtype=torch.float32),
                            torch.tensor(np.stack(means), dtype=torch.float32))
        return torch.tensor(np.stack(xs), dtype=torch.float32), cond

    def compute_loss(self, x0, cond, generator=None):
        if self.objective == "regression":
            zeros = torch.zeros_like(x0)
            t = torch.zeros(x0.shape[0], dtype=torch.long)
            resid = x0 - self.model_(zeros, t, cond)
            return resid.pow(2).mean() if self.loss == "l2" else resid.abs().mean()
        return ddpm.training_loss(self.model_, x0, cond, self.schedule_, generator, self.loss)

    def train_step(self):
        x0, cond = self.sample_batch()
        self.model_.train()
        self.optimizer_.zero_grad()
        loss = self.compute_loss(x0, cond, self.generator_)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"non-finite A2L loss at step {self.step_}")
        loss.backward()
        self.optimizer_.step()
        self.step_ += 1
        value = float(loss.detach())
        self.loss_history_.append(value)
        return value

    def fit(self, audio, landmarks):
        self.initialize()
        self.set_data(audio, landmarks)
        for _ in range(self.n_steps):
            self.train_step()
        return self

    # -- inference ---------------------------------------------------------
    @torch.no_grad()
    def predict(self, audio_windows, mean_landmarks, generator=None):
        """Normalized canonical windows for a batch of audio windows.

        ``audio_windows``: (n, l, D_a); ``mean_landmarks``: (n, L, 3) or (L, 3).
        Returns (n, l, L, 3).
        """
        check_is_fitted(self, "model_")
        audio = torch.as_tensor(np.asarray(audio_windows), dtype=torch.float32)
        if audio.ndim == 2:
            audio = audio[None]
        n, l, _ = audio.shape
        mean = np.asarray(mean_landmarks, dtype=np.float64).reshape(-1, 3 * self.n_landmarks)
        mean = torch.as_tensor(np.broadcast_to(mean, (n, mean.shape[-1])).copy(), dtype=torch.float32)
        cond = A2LCondition(audio, mean)
        self.model_.eval()
        if self.objective == "regression":
            out = self.model_(torch.zeros(n, l, 3 * self.n_landmarks),
                              torch.zeros(n, dtype=torch.long), cond)
        else:
            gen = generator if generator is not None else torch.Generator().manual_seed(0)
            out = ddpm.sample(self.model_, (n, l, 3 * self.n_landmarks), cond, self.schedule_,
                              gen, self.sample_stride)
        return out.numpy().astype(np.float64).reshape(n, l, self.n_landmarks, 3)

    def n_parameters(self):
        return sum(p.numel() for p in self.model_.parameters())

    # -- persistence -------------------------------------------------------
    def state_arrays(self, prefix="a2l/"):
        arrays = module_arrays(self.model_, prefix + "model/")
        arrays.update(optimizer_arrays(self.optimizer_, prefix + "optim/"))
        arrays[prefix + "generator"] = self.generator_.get_state().numpy().copy()
        arrays[prefix + "loss_history"] = np.asarray(self.loss_history_, dtype=np.float64)
        return arrays

    def load_state_arrays(self, arrays, rng_state=None, step=0, prefix="a2l/"):
        self.initialize()
        load_module_arrays(self.model_, arrays, prefix + "model/")
        load_optimizer_arrays(self.optimizer_, arrays, prefix + "optim/")
        self.generator_.set_state(torch.from_numpy(np.array(arrays[prefix + "generator"])))
        self.loss_history_ = list(np.asarray(arrays[prefix + "loss_history"]))
        if rng_state is not None:
            self.rng_.bit_generator.state = rng_state
        self.step_ = step
        return self

    def save(self, path):
        config = {"kind": "a2l", "params": self.get_params(), "step": self.step_,
                  "rng_state": self.rng_.bit_generator.state}
        save_npz(path, config, self.state_arrays())

    @classmethod
    def load(cls, path):
        config, arrays = load_npz(path)
        est = cls(**config["params"])
        return est.load_state_arrays(arrays, config["rng_state"], config["step"])
