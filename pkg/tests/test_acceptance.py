"""Acceptance gate: one PASS/FAIL line per criterion, tolerances pinned below.

Run ``pytest tests/test_acceptance.py -v``; the criterion lines are printed in
the terminal summary. ``python tests/test_acceptance.py`` prints them directly.
The training-based criteria (5-8) share models through session fixtures and
take roughly half an hour on one CPU core.
"""

from __future__ import annotations

import dataclasses
import time

import numpy as np
import pytest
import torch
from matplotlib.path import Path as MplPath
from scipy.spatial import ConvexHull

from headdiff import ddpm, metrics, pipeline
from headdiff.a2l import A2LCondition, A2LDiffusion, A2LNet
from headdiff.config import ExperimentConfig, merge_overrides
from headdiff.geometry import (
    RigidPose,
    apply_pose,
    canonicalize,
    compute_stats,
    denormalize,
    normalize,
)
from headdiff.l2i import ABLATIONS, L2ICondition, L2IDiffusion, L2INet, mouth_mask
from headdiff.synthdata import GeneratorConfig, generate_clip, mouth_mask_from_image, render_mouth_mask

from helpers import ACCEPTANCE_LINES, finite_difference_check

pytestmark = pytest.mark.slow

# -- pinned tolerances and scales ---------------------------------------------
POSE_TOL = 1e-6
NORM_TOL = 1e-9
N_GEOMETRY_CASES = 1000
GEOMETRY_BUDGET_S = 10.0

MARGINAL_TRIALS = 100_000
MARGINAL_T = 50
MARGINAL_REL_TOL = 0.05
MARGINAL_BUDGET_S = 60.0

GRAD_REL_TOL = 1e-4
GRAD_MIN_PARAMS = 10
GRAD_BUDGET_S = 60.0

METRIC_TOL = 1e-9
N_METRIC_CASES = 100
METRIC_BUDGET_S = 10.0

SEEDS = (0, 1, 2)
N_TRAIN_CLIPS = 16
N_TEST_CLIPS = 4
A2L_WINDOW = 20
A2L_BLOCKS = 4
A2L_T = 200
A2L_STEPS = 2000
A2L_HIDDEN = 256  # >= 3L
A2L_LR = 1e-3
A2L_BUDGET_S = 15 * 60.0
CORR_MIN = 0.8

L2I_SIZE = 32
L2I_T = 200
L2I_BETAS = (5e-4, 0.1)  # linear 1e-4..0.02 rescaled by 1000 / T so alpha_bar_T ~ 3e-5
L2I_WIDTH = 64  # >= latent channels (48)
L2I_STEPS = 1500
L2I_LR = 1e-3
L2I_FRAMES = 60

TAUS = (10, 20, 40)

UPPER = [49, 50, 51, 52, 53, 61, 62, 63]
LOWER = [55, 56, 57, 58, 59, 65, 66, 67]


def record(n, ok, detail):
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


# -- 1 ------------------------------------------------------------------------


def test_criterion_01_geometry_round_trips():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst_pose = worst_norm = 0.0
    for _ in range(N_GEOMETRY_CASES):
        pose = RigidPose.from_euler(rng.uniform(-np.pi, np.pi, 3), rng.uniform(-50, 50, 3),
                                    rng.uniform(0.1, 10))
        f = rng.normal(scale=rng.uniform(0.1, 50), size=(68, 3))
        worst_pose = max(worst_pose, np.abs(apply_pose(canonicalize(f, pose), pose) - f).max(),
                         np.abs(canonicalize(apply_pose(f, pose), pose) - f).max())
        seq = rng.normal(scale=rng.uniform(0.1, 50), size=(int(rng.integers(1, 12)), 68, 3))
        stats = compute_stats(seq)
        worst_norm = max(worst_norm, np.abs(denormalize(normalize(f, stats), stats) - f).max())
    dt = time.perf_counter() - t0
    ok = worst_pose <= POSE_TOL and worst_norm <= NORM_TOL and dt < GEOMETRY_BUDGET_S
    assert record(1, ok, f"pose err {worst_pose:.2e} <= {POSE_TOL:g}, norm err {worst_norm:.2e} "
                         f"<= {NORM_TOL:g}, {N_GEOMETRY_CASES} cases in {dt:.1f}s")


# -- 2 ------------------------------------------------------------------------


def test_criterion_02_ddpm_marginal_consistency():
    t0 = time.perf_counter()
    sched = ddpm.make_linear_schedule(MARGINAL_T)
    g = torch.Generator().manual_seed(0)
    x0 = 1.5
    x = torch.full((MARGINAL_TRIALS,), x0, dtype=torch.float64)
    worst = 0.0
    checks = []
    for t in range(MARGINAL_T):
        # one forward step q(x_t | x_{t-1}) = N(sqrt(1 - beta_t) x_{t-1}, beta_t)
        beta = float(sched.beta[t])
        x = np.sqrt(1 - beta) * x + np.sqrt(beta) * torch.randn(MARGINAL_TRIALS, generator=g,
                                                                dtype=torch.float64)
        if t in (0, 9, 24, MARGINAL_T - 1):
            eps = torch.randn(MARGINAL_TRIALS, generator=g, dtype=torch.float64)
            closed = ddpm.q_sample(torch.full_like(eps, x0), torch.full((MARGINAL_TRIALS,), t), eps, sched)
            ab = sched.alpha_bar[t]
            for emp, ref in ((float(x.mean()), np.sqrt(ab) * x0), (float(x.var()), 1 - ab),
                             (float(closed.mean()), np.sqrt(ab) * x0), (float(closed.var()), 1 - ab)):
                worst = max(worst, abs(emp - ref) / ref)
            checks.append(t)
    dt = time.perf_counter() - t0
    ok = worst <= MARGINAL_REL_TOL and dt < MARGINAL_BUDGET_S
    assert record(2, ok, f"max rel. dev. of mean/var {worst:.4f} <= {MARGINAL_REL_TOL} at t={checks}, "
                         f"{MARGINAL_TRIALS} trials, {dt:.1f}s")


# -- 3 ------------------------------------------------------------------------


def test_criterion_03_gradient_checks():
    t0 = time.perf_counter()
    sched = ddpm.make_linear_schedule(50)
    g = torch.Generator().manual_seed(0)

    torch.manual_seed(0)
    a2l = A2LNet(n_landmarks=68, audio_dim=4, hidden_dim=16, n_blocks=2, window=6).double()
    x0 = torch.randn(2, 6, 204, generator=g, dtype=torch.float64)
    cond = A2LCondition(torch.randn(2, 6, 4, generator=g, dtype=torch.float64),
                        torch.randn(2, 204, generator=g, dtype=torch.float64))
    res_a = finite_difference_check(
        a2l, lambda: ddpm.training_loss(a2l, x0, cond, sched, torch.Generator().manual_seed(1)))

    torch.manual_seed(0)
    l2i = L2INet(latent_channels=12, latent_size=4, base_width=8).double()
    with torch.no_grad():
        l2i.attn.pos.normal_()
    z0 = torch.randn(2, 12, 4, 4, generator=g, dtype=torch.float64)
    lc = L2ICondition(*[torch.randn(2, 12, 4, 4, generator=g, dtype=torch.float64) for _ in range(4)])
    res_l = finite_difference_check(
        l2i, lambda: ddpm.training_loss(l2i, z0, lc, sched, torch.Generator().manual_seed(1)))

    dt = time.perf_counter() - t0
    ea, el = max(r[-1] for r in res_a), max(r[-1] for r in res_l)
    ok = (len(res_a) >= GRAD_MIN_PARAMS and len(res_l) >= GRAD_MIN_PARAMS
          and ea <= GRAD_REL_TOL and el <= GRAD_REL_TOL and dt < GRAD_BUDGET_S)
    assert record(3, ok, f"A2L max rel. err {ea:.2e} ({len(res_a)} params), L2I {el:.2e} "
                         f"({len(res_l)} params) <= {GRAD_REL_TOL:g}, {dt:.1f}s")


# -- 4 ------------------------------------------------------------------------


def naive_metrics(p, g, idx):
    T, L, _ = p.shape
    out = {}
    d = [np.sqrt((p[t, i, 0] - g[t, i, 0]) ** 2 + (p[t, i, 1] - g[t, i, 1]) ** 2) for t in range(T) for i in idx]
    out["lmd"] = sum(d) / len(d)
    dv = []
    for t in range(1, T):
        for i in idx:
            vx = (p[t, i, 0] - p[t - 1, i, 0]) - (g[t, i, 0] - g[t - 1, i, 0])
            vy = (p[t, i, 1] - p[t - 1, i, 1]) - (g[t, i, 1] - g[t - 1, i, 1])
            dv.append(np.sqrt(vx * vx + vy * vy))
    out["lmd_v"] = sum(dv) / len(dv)
    e = [np.sqrt(sum((p[t, i, k] - g[t, i, k]) ** 2 for k in range(3))) for t in range(T) for i in range(L)]
    out["error_norm"] = sum(e) / len(e)
    j = [np.sqrt(sum((p[t + 1, i, k] - 2 * p[t, i, k] + p[t - 1, i, k]) ** 2 for k in range(3)))
         for t in range(1, T - 1) for i in range(L)]
    out["jitter"] = sum(j) / len(j)
    ious = []
    for t in range(T):
        a, b = p[t][idx, :2], g[t][idx, :2]
        ha, hb = a[ConvexHull(a).vertices], b[ConvexHull(b).vertices]
        both = np.concatenate([ha, hb])
        lo, hi = both.min(0) - 1.0, both.max(0) + 1.0
        px = max(hi - lo) / 256
        nx, ny = int(np.ceil((hi[0] - lo[0]) / px)), int(np.ceil((hi[1] - lo[1]) / px))
        cells = np.array([(lo[0] + (x + 0.5) * px, lo[1] + (y + 0.5) * px) for y in range(ny) for x in range(nx)])
        ia = MplPath(np.vstack([ha, ha[:1]])).contains_points(cells)
        ib = MplPath(np.vstack([hb, hb[:1]])).contains_points(cells)
        ious.append((ia & ib).sum() / (ia | ib).sum())
    out["ma"] = sum(ious) / len(ious)
    return out


def naive_frame_consistency(frames):
    vals = []
    for a, b in zip(frames[:-1], frames[1:]):
        vals.append(1 - sum(abs(x - y) for x, y in zip(a.ravel(), b.ravel())) / a.size)
    return sum(vals) / len(vals)


def test_criterion_04_metric_oracles():
    rng = np.random.default_rng(7)
    idx = np.arange(4, 12)
    t0 = time.perf_counter()
    worst = {k: 0.0 for k in ("lmd", "lmd_v", "ma", "error_norm", "jitter", "frame_consistency")}
    t_naive = 0.0
    for _ in range(N_METRIC_CASES):
        T = int(rng.integers(3, 5))
        g = rng.normal(scale=5, size=(T, 12, 3))
        p = g + rng.normal(scale=1.0, size=g.shape)
        frames = rng.uniform(size=(T, 4, 4, 3))
        fast = {
            "lmd": metrics.lmd(p, g, idx),
            "lmd_v": metrics.lmd_v(p, g, idx),
            "ma": metrics.mouth_iou(p, g, idx),
            "error_norm": metrics.error_norm(p, g),
            "jitter": metrics.jitter(p),
            "frame_consistency": metrics.frame_consistency(frames),
        }
        s = time.perf_counter()
        ref = naive_metrics(p, g, idx)
        ref["frame_consistency"] = naive_frame_consistency(frames)
        t_naive += time.perf_counter() - s
        for k in worst:
            worst[k] = max(worst[k], abs(fast[k] - ref[k]))
    dt = time.perf_counter() - t0 - t_naive
    ok = max(worst.values()) <= METRIC_TOL and dt < METRIC_BUDGET_S
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    assert record(4, ok, f"max |fast - naive|: {detail} <= {METRIC_TOL:g}; {N_METRIC_CASES} cases, "
                         f"metric time {dt:.1f}s")


# -- shared A2L training (criteria 5-7, 9) --------------------------------------


def a2l_data(seed):
    train = [generate_clip(GeneratorConfig(seed=1000 * seed + s, image_size=32)) for s in range(N_TRAIN_CLIPS)]
    return train


@pytest.fixture(scope="session")
def a2l_test_clips():
    return [generate_clip(GeneratorConfig(seed=99_000 + s, image_size=L2I_SIZE)) for s in range(N_TEST_CLIPS)]


def train_a2l(seed, **flags):
    train = a2l_data(seed)
    est = A2LDiffusion(n_landmarks=68, audio_dim=16, hidden_dim=A2L_HIDDEN, n_blocks=A2L_BLOCKS,
                       window=A2L_WINDOW, n_timesteps=A2L_T, learning_rate=A2L_LR, n_steps=A2L_STEPS,
                       batch_size=16, random_state=seed, **flags)
    t0 = time.perf_counter()
    est.fit([c.audio for c in train], [c.canonical_landmarks() for c in train])
    est.fit_seconds_ = time.perf_counter() - t0
    return est


def held_out_windows(est, clips, seed):
    """Denormalized canonical windows over non-overlapping held-out windows."""
    out = []
    for c in clips:
        can = c.canonical_landmarks()
        stats = compute_stats(can)
        starts = list(range(0, len(c) - A2L_WINDOW + 1, A2L_WINDOW))
        aw = np.stack([c.audio[s:s + A2L_WINDOW] for s in starts])
        gens = [torch.Generator().manual_seed(seed * 1000 + k) for k in range(len(starts))]
        pred = est.predict(aw, stats.mean, generator=gens)
        for k, s in enumerate(starts):
            out.append((denormalize(pred[k], stats), c.articulation[s:s + A2L_WINDOW], can[s:s + A2L_WINDOW]))
    return out


def summarize(windows):
    op = np.concatenate([metrics.mouth_opening(p, UPPER, LOWER) for p, _, _ in windows])
    art = np.concatenate([a for _, a, _ in windows])
    return {"corr": float(np.corrcoef(op, art)[0, 1]),
            "jitter": float(np.mean([metrics.jitter(p) for p, _, _ in windows])),
            "gt_jitter": float(np.mean([metrics.jitter(g) for _, _, g in windows]))}


@pytest.fixture(scope="session")
def a2l_runs(a2l_test_clips):
    runs = {}
    variants = {"diffusion": {}, "regression": {"objective": "regression"},
                "no_tu": {"temporal_unit": False}}
    for name, flags in variants.items():
        for seed in SEEDS:
            est = train_a2l(seed, **flags)
            s = summarize(held_out_windows(est, a2l_test_clips, seed))
            s["fit_seconds"] = est.fit_seconds_
            runs[name, seed] = (est, s)
    return runs


def test_criterion_05_a2l_learns_articulation(a2l_runs):
    corrs = [a2l_runs["diffusion", s][1]["corr"] for s in SEEDS]
    secs = [a2l_runs["diffusion", s][1]["fit_seconds"] for s in SEEDS]
    med = float(np.median(corrs))
    ok = med >= CORR_MIN and max(secs) <= A2L_BUDGET_S
    assert record(5, ok, f"median corr {med:.3f} >= {CORR_MIN} (per seed {np.round(corrs, 3).tolist()}), "
                         f"max train time {max(secs):.0f}s <= {A2L_BUDGET_S:.0f}s")


def test_criterion_06_diffusion_smoother_than_regression(a2l_runs):
    jd = float(np.median([a2l_runs["diffusion", s][1]["jitter"] for s in SEEDS]))
    jr = float(np.median([a2l_runs["regression", s][1]["jitter"] for s in SEEDS]))
    gt = float(np.median([a2l_runs["diffusion", s][1]["gt_jitter"] for s in SEEDS]))
    ok = jd < jr
    assert record(6, ok, f"median jitter diffusion {jd:.5f} < regression {jr:.5f} "
                         f"(ground truth {gt:.5f})")


def test_criterion_07_temporal_unit_reduces_jitter(a2l_runs):
    jd = float(np.median([a2l_runs["diffusion", s][1]["jitter"] for s in SEEDS]))
    jn = float(np.median([a2l_runs["no_tu", s][1]["jitter"] for s in SEEDS]))
    ok = jn > jd
    assert record(7, ok, f"median jitter w/o temporal unit {jn:.5f} > full {jd:.5f}")


# -- 8 ------------------------------------------------------------------------


def l2i_clips(seed):
    return [generate_clip(GeneratorConfig(seed=1000 * seed + s, image_size=L2I_SIZE, n_frames=L2I_FRAMES))
            for s in range(N_TRAIN_CLIPS)]


def train_l2i(seed, ablation):
    return L2IDiffusion(image_size=L2I_SIZE, base_width=L2I_WIDTH, n_timesteps=L2I_T,
                        beta_start=L2I_BETAS[0], beta_end=L2I_BETAS[1], learning_rate=L2I_LR,
                        n_steps=L2I_STEPS, batch_size=16, drop_conditions=ABLATIONS[ablation],
                        random_state=seed).fit(l2i_clips(seed))


def mouth_region_iou(est, clips):
    """IoU of palette-segmented mouth pixels vs the rendered ground-truth mouth."""
    ious, exact = [], True
    for c in clips:
        idx = list(range(5, len(c), 11))
        gens = [torch.Generator().manual_seed(k) for k in idx]
        frames = est.generate_frames(c, idx, ref_index=0, generator=gens)
        for f, i in zip(frames, idx):
            m = mouth_mask(c.landmarks.points[i], c.image_size)
            exact &= bool(np.array_equal(f[~m], c.images[i][~m]))
        pm = np.stack([mouth_mask_from_image(f, c.palette) for f in frames])
        gm = np.stack([render_mouth_mask(c.landmarks.points[i], c.image_size) for i in idx])
        ious.append(metrics.mouth_iou(pm, gm))
    return float(np.mean(ious)), exact


@pytest.fixture(scope="session")
def l2i_runs():
    test = [generate_clip(GeneratorConfig(seed=99_000 + s, image_size=L2I_SIZE, n_frames=L2I_FRAMES))
            for s in range(N_TEST_CLIPS)]
    runs = {}
    for ablation in ("full", "wo_refP_masked", "unconditional"):
        for seed in SEEDS:
            est = train_l2i(seed, ablation)
            runs[ablation, seed] = (est, *mouth_region_iou(est, test))
    return runs


def test_criterion_08_l2i_conditioning(l2i_runs):
    med = {a: float(np.median([l2i_runs[a, s][1] for s in SEEDS]))
           for a in ("full", "wo_refP_masked", "unconditional")}
    exact = all(v[2] for v in l2i_runs.values())
    ok = med["full"] > med["wo_refP_masked"] and med["full"] > med["unconditional"] and exact
    assert record(8, ok, f"median mouth IoU full {med['full']:.3f} > w/o ref-landmarks+masked "
                         f"{med['wo_refP_masked']:.3f} and > unconditional {med['unconditional']:.3f}; "
                         f"unmasked pixels bit-exact: {exact}")


# -- 9 ------------------------------------------------------------------------


class Tripwire:
    """Stands in for a clip's landmark track; any access fails the run."""

    def __getattr__(self, name):
        raise AssertionError(f"inference touched driven-frame landmarks via .{name}")


def test_criterion_09_end_to_end_inference(a2l_runs, l2i_runs, a2l_test_clips):
    cfg = merge_overrides(ExperimentConfig(), {"a2l.window": A2L_WINDOW})
    ckpt = pipeline.Checkpoint(cfg, a2l_runs["diffusion", 0][0], l2i_runs["full", 0][0])
    clip = a2l_test_clips[0]
    driving = a2l_test_clips[1].audio[:57]
    style = pipeline.extract_style(clip)
    blind = dataclasses.replace(clip, landmarks=Tripwire())
    try:
        a = pipeline.infer(ckpt, blind, driving, seed=11, style=style)
        b = pipeline.infer(ckpt, blind, driving, seed=11, style=style)
    except AssertionError as exc:
        assert record(9, False, str(exc))
    count_ok = len(a["frames"]) == len(driving) == len(a["posed"])
    det = np.array_equal(a["frames"], b["frames"]) and np.array_equal(a["posed"], b["posed"])
    ok = count_ok and det
    assert record(9, ok, f"frames {len(a['frames'])} == audio length {len(driving)}, deterministic: {det}, "
                         f"no ground-truth landmark reads during inference")


# -- 10 -----------------------------------------------------------------------


def test_criterion_10_tau_sweep(tmp_path):
    clips = [generate_clip(GeneratorConfig(seed=s, image_size=16, n_frames=50)) for s in range(2)]
    test = [generate_clip(GeneratorConfig(seed=500, image_size=16, n_frames=50))]
    cfg = merge_overrides(ExperimentConfig(), {
        "schedule.T": 20, "a2l.hidden_dim": 16, "a2l.n_blocks": 1, "a2l.batch_size": 4,
        "l2i.base_width": 8, "l2i.batch_size": 4})
    rows = pipeline.sweep_tau(cfg, clips, test, TAUS, tmp_path, steps=5, max_frames=6)
    keys = set(pipeline.REPORT_KEYS)
    schema = all(keys <= set(r) for r in rows) and [r["tau"] for r in rows] == list(TAUS)
    files = (tmp_path / "report.json").exists() and (tmp_path / "report.png").stat().st_size > 0
    ok = schema and files
    assert record(10, ok, f"taus {[r['tau'] for r in rows]} each with {sorted(keys)}; report written: {files}")


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
