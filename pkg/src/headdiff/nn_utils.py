"""Small torch helpers shared by both denoisers, plus npz state I/O."""

from __future__ import annotations

import json
import math

import numpy as np
import torch
from torch import nn


def timestep_embedding(t, dim, max_period=10000.0):
    """Sinusoidal embedding of integer timesteps, shape (B, dim)."""
    t = torch.as_tensor(t).reshape(-1).float()
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / max(half, 1))
    args = t[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


class TimestepEmbedding(nn.Module):
    def __init__(self, dim, out_dim=None):
        super().__init__()
        self.dim = dim
        self.proj = nn.Linear(dim, out_dim or dim)

    def forward(self, t):
        emb = timestep_embedding(t, self.dim).to(self.proj.weight.dtype)
        return self.proj(emb)


def zero_parameters(module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()
    return module


def module_arrays(module, prefix=""):
    return {prefix + k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def load_module_arrays(module, arrays, prefix=""):
    state = {k[len(prefix):]: torch.from_numpy(np.array(v)) for k, v in arrays.items() if k.startswith(prefix)}
    module.load_state_dict(state)


def optimizer_arrays(opt, prefix):
    """Flatten an optimizer state dict into named arrays plus a JSON header."""
    sd = opt.state_dict()
    out = {}
    for idx, st in sd["state"].items():
        for key, val in st.items():
            out[f"{prefix}state/{idx}/{key}"] = torch.as_tensor(val).detach().cpu().numpy().copy()
    out[f"{prefix}param_groups"] = np.array(json.dumps(sd["param_groups"]))
    return out


def load_optimizer_arrays(opt, arrays, prefix):
    state = {}
    for k, v in arrays.items():
        if k.startswith(prefix + "state/"):
            _, idx, key = k[len(prefix):].split("/")
            state.setdefault(int(idx), {})[key] = torch.from_numpy(np.array(v))
    groups = json.loads(str(arrays[prefix + "param_groups"]))
    opt.load_state_dict({"state": state, "param_groups": groups})


def save_npz(path, config, arrays):
    """Write ``config`` (JSON-able) and named arrays to one uncompressed npz."""
    payload = {"__config__": np.array(json.dumps(config, sort_keys=True))}
    payload.update(arrays)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_npz(path):
    with np.load(path, allow_pickle=False) as data:
        arrays = {k: data[k] for k in data.files}
    config = json.loads(str(arrays.pop("__config__")))
    return config, arrays
