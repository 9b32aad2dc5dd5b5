import numpy as np
import pytest
import torch

from headdiff import ddpm
from headdiff.a2l import (
    A2LCondition,
    A2LDiffusion,
    A2LNet,
    TemporalBlock,
    fuse_conditions,
    generate_landmarks,
    predict_noise,
    regress_landmarks,
    temporal_block,
)
from headdiff.nn_utils import zero_parameters
from headdiff.validation import ShapeError

from helpers import finite_difference_check


def tiny_net(**kw):
    torch.manual_seed(0)
    args = dict(n_landmarks=68, audio_dim=4, hidden_dim=16, n_blocks=2, window=8)
    args.update(kw)
    return A2LNet(**args)


def cond_for(net, l=8, seed=0):
    g = torch.Generator().manual_seed(seed)
    return A2LCondition(torch.randn(l, net.audio_dim, generator=g),
                        torch.randn(3 * net.n_landmarks, generator=g))


def test_zero_weights_zero_fusion():
    net = zero_parameters(tiny_net())
    c = cond_for(net)
    out = fuse_conditions(net, c.audio, c.mean_landmarks, torch.randn(8, 204), 5)
    assert out.shape == (8, 16)
    assert torch.all(out == 0)


def test_fusion_is_additive_in_audio():
    net = zero_parameters(tiny_net(audio_dim=16))
    with torch.no_grad():
        net.f_audio.weight.copy_(torch.eye(16))
    c = cond_for(net)
    out = fuse_conditions(net, c.audio, c.mean_landmarks, torch.randn(8, 204), 3)
    torch.testing.assert_close(out, c.audio)


def test_fusion_by_hand():
    # L = 2 landmarks (3L = 6), D_a = 1, D_h = 2, a single frame
    net = zero_parameters(A2LNet(n_landmarks=2, audio_dim=1, hidden_dim=2, n_blocks=0, window=1))
    with torch.no_grad():
        net.f_audio.weight.copy_(torch.tensor([[1.0], [2.0]]))
        net.f_mean.weight[0, 0] = 1.0
        net.f_points.weight[1, 5] = -1.0
        net.f_time.proj.bias.copy_(torch.tensor([0.5, -0.5]))
        net.f_agg.weight.copy_(torch.tensor([[1.0, 0, 1, 0], [0, 1, 0, 1]]))
        net.f_agg.bias.copy_(torch.tensor([0.25, 0.0]))
    audio = torch.tensor([[3.0]])
    mean = torch.tensor([10.0, 0, 0, 0, 0, 0])
    x = torch.tensor([[0.0, 0, 0, 0, 0, 4.0]])
    out = fuse_conditions(net, audio, mean, x, 7)
    # audio (3, 6) + mean (10, 0) + agg((0, -4) ++ (0.5, -0.5)) = (3, 6) + (10, 0) + (0.75, -4.5)
    torch.testing.assert_close(out, torch.tensor([[13.75, 1.5]]))


def test_temporal_block_zero_in_zero_out():
    blk = TemporalBlock(8, residual=False)
    with torch.no_grad():
        blk.tu_conv.bias.zero_()
        blk.mu_fc.bias.zero_()
    assert torch.all(temporal_block(blk, torch.zeros(5, 8)) == 0)


def test_temporal_block_shift_equivariance():
    torch.manual_seed(1)
    blk = TemporalBlock(8, kernel_size=3)
    x = torch.randn(12, 8)
    y = temporal_block(blk, x)
    y_shift = temporal_block(blk, x[1:])
    # interior frames, away from the padded ends
    torch.testing.assert_close(y_shift[1:-1], y[2:-1])


def test_temporal_block_single_frame_is_pointwise():
    torch.manual_seed(2)
    blk = TemporalBlock(6, residual=False, mapping_unit=False)
    x = torch.randn(1, 6)
    ref = torch.relu(blk.tu_conv.weight[:, :, 1] @ blk.tu_norm(x)[0] + blk.tu_conv.bias)
    torch.testing.assert_close(temporal_block(blk, x)[0], ref)


def test_predict_noise_shape_and_errors():
    net = tiny_net(window=20)
    c = cond_for(net, 20)
    assert predict_noise(net, torch.randn(20, 204), 3, c).shape == (20, 204)
    assert predict_noise(net, torch.randn(2, 20, 204), torch.tensor([1, 2]),
                         A2LCondition(c.audio.expand(2, -1, -1), c.mean_landmarks.expand(2, -1))).shape == (2, 20, 204)
    with pytest.raises(ShapeError):
        predict_noise(net, torch.randn(20, 200), 3, c)


def test_zero_blocks_is_projection_of_fusion():
    net = tiny_net(n_blocks=0)
    c = cond_for(net)
    x = torch.randn(8, 204)
    h = fuse_conditions(net, c.audio, c.mean_landmarks, x, 4)
    torch.testing.assert_close(predict_noise(net, x, 4, c), net.proj_out(h))


@pytest.mark.parametrize("flags", [{}, {"temporal_unit": False}, {"residual": False}])
def test_gradient_check(flags):
    net = tiny_net(**flags)
    net.double()
    sched = ddpm.make_linear_schedule(50)
    g = torch.Generator().manual_seed(0)
    x0 = torch.randn(2, 8, 204, generator=g, dtype=torch.float64)
    cond = A2LCondition(torch.randn(2, 8, 4, generator=g, dtype=torch.float64),
                        torch.randn(2, 204, generator=g, dtype=torch.float64))

    def loss():
        return ddpm.training_loss(net, x0, cond, sched, torch.Generator().manual_seed(5))

    res = finite_difference_check(net, loss)
    assert len(res) >= 10
    assert max(r[-1] for r in res) <= 1e-4, res


def test_generate_and_regress_contracts():
    net = tiny_net()
    sched = ddpm.make_linear_schedule(10)
    c = cond_for(net)
    a = generate_landmarks(net, c, sched, torch.Generator().manual_seed(0))
    b = generate_landmarks(net, c, sched, torch.Generator().manual_seed(0))
    assert len(a) == 8 and a.n_landmarks == 68
    np.testing.assert_array_equal(a.points, b.points)
    r1, r2 = regress_landmarks(net, c), regress_landmarks(net, c)
    assert r1.points.shape == (8, 68, 3)
    np.testing.assert_array_equal(r1.points, r2.points)


def small_estimator(**kw):
    args = dict(hidden_dim=16, n_blocks=1, window=8, n_timesteps=10, batch_size=4, n_steps=3,
                random_state=0)
    args.update(kw)
    return A2LDiffusion(**args)


def test_estimator_fit_predict(small_clips):
    audio = [c.audio for c in small_clips]
    lmk = [c.canonical_landmarks() for c in small_clips]
    est = small_estimator().fit(audio, lmk)
    assert len(est.loss_history_) == 3
    out = est.predict(audio[0][None, :8], lmk[0].mean(axis=0))
    assert out.shape == (1, 8, 68, 3)
    reg = small_estimator(objective="regression").fit(audio, lmk)
    np.testing.assert_array_equal(reg.predict(audio[0][None, :8], lmk[0].mean(0)),
                                  reg.predict(audio[0][None, :8], lmk[0].mean(0)))
    assert est.get_params()["hidden_dim"] == 16


def test_estimator_rejects_bad_data(small_clips):
    est = small_estimator().initialize()
    with pytest.raises(ShapeError):
        est.set_data([small_clips[0].audio[:5]], [small_clips[0].canonical_landmarks()[:5]])
    with pytest.raises(ValueError):
        small_estimator(objective="gan").initialize()


def test_estimator_save_load_resumes_bit_exact(small_clips, tmp_path):
    audio = [c.audio for c in small_clips]
    lmk = [c.canonical_landmarks() for c in small_clips]
    a = small_estimator().fit(audio, lmk)
    a.save(tmp_path / "a.npz")
    b = A2LDiffusion.load(tmp_path / "a.npz").set_data(audio, lmk)
    assert a.train_step() == b.train_step()
    for p, q in zip(a.model_.parameters(), b.model_.parameters()):
        assert torch.equal(p, q)
