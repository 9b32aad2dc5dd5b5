"""Shared oracles for the test suite."""

import numpy as np
import torch


def finite_difference_check(module, loss_fn, n_params=10, eps=1e-5, seed=0):
    """Compare autograd with central differences on ``n_params`` random scalar parameters.

    ``loss_fn()`` must be deterministic. Returns a list of
    (name, index, analytic, numeric, relative error).
    """
    module.double()
    params = [(n, p) for n, p in module.named_parameters() if p.requires_grad]
    module.zero_grad()
    loss_fn().backward()
    rng = np.random.default_rng(seed)
    out = []
    tried = 0
    while len(out) < n_params and tried < 50 * n_params:
        tried += 1
        name, p = params[rng.integers(len(params))]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        analytic = float(p.grad[idx])
        if abs(analytic) < 1e-6:
            continue  # skip dead units; relative error is meaningless there
        with torch.no_grad():
            orig = float(p[idx])
            p[idx] = orig + eps
            up = float(loss_fn())
            p[idx] = orig - eps
            down = float(loss_fn())
            p[idx] = orig
        numeric = (up - down) / (2 * eps)
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric))
        out.append((name, idx, analytic, numeric, rel))
    return out


# criterion lines collected by test_acceptance and printed by conftest
ACCEPTANCE_LINES = []
