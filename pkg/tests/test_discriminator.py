import math

import numpy as np
import pytest
import torch

from depthgan.discriminator import DiscriminatorConfig, SwitchableDiscriminator, depth_to_input
from depthgan.layers import lrelu

from gradcheck import check_param_grads


def make(res=64, **kw):
    torch.manual_seed(0)
    cfg = DiscriminatorConfig(resolution=res, channel_base=128, channel_max=8, branch_channels=8, **kw)
    return SwitchableDiscriminator(cfg).double().eval()


def batch(b=2, res=64, seed=0):
    g = torch.Generator().manual_seed(seed)
    rgb = torch.rand(b, 3, res, res, generator=g, dtype=torch.float64) * 2 - 1
    depth = torch.rand(b, 1, res, res, generator=g, dtype=torch.float64) * 2 - 1
    return rgb, depth


def test_score_shape_and_determinism():
    d = make()
    rgb, depth = batch(3)
    s = d.score(rgb, depth)
    assert s.shape == (3,)
    assert torch.equal(s, d.score(rgb, depth))


def test_score_requires_depth():
    d = make()
    with pytest.raises(ValueError):
        d.score(batch()[0], None)


def test_zeroed_depth_input_ignores_depth():
    d = make()
    torch.nn.init.zeros_(d.depth_in.weight)
    rgb, depth = batch()
    assert torch.equal(d.score(rgb, depth), d.score(rgb, -depth))


def test_input_additivity():
    d = make()
    rgb, depth = batch()
    manual = d.head(d.trunk(lrelu(d.rgb_in(rgb) + d.depth_in(depth))))
    assert torch.allclose(d.score(rgb, depth), manual, atol=1e-12)


def test_predict_depth_mode_exclusive():
    d = make()
    rgb, _ = batch()
    a = d.predict_depth(rgb)
    with torch.no_grad():
        d.depth_in.weight.normal_()
    assert torch.equal(a, d.predict_depth(rgb))


def test_branch_taps_and_output_sizes():
    assert DiscriminatorConfig(resolution=128).branch_taps == [16, 32, 64]
    assert DiscriminatorConfig(resolution=256).branch_taps == [16, 32, 64]
    assert DiscriminatorConfig(resolution=64).branch_taps == [8, 16, 32]
    d = make(128)
    logits = d.predict_depth(batch(1, 128)[0])
    assert logits.shape == (1, 10, 64, 64)
    p = torch.softmax(logits, dim=1).sum(dim=1)
    assert torch.allclose(p, torch.ones_like(p), atol=1e-6)
    assert torch.equal(logits, d.predict_depth(batch(1, 128)[0]))


def test_small_input_rejected_for_depth():
    d = make(32)
    with pytest.raises(ValueError, match="64px"):
        d.predict_depth(batch(1, 32)[0])


def test_wrong_shapes():
    d = make()
    rgb, depth = batch()
    with pytest.raises(ValueError):
        d.score(rgb[:, :2], depth)
    with pytest.raises(ValueError):
        d.score(rgb, depth[:1])
    with pytest.raises(ValueError):
        d.score(batch(2, 32)[0], batch(2, 32)[1])


def test_depth_to_input_range():
    d = torch.tensor([0.5, 10.0, 5.25])
    assert torch.allclose(depth_to_input(d, 0.5, 10.0), torch.tensor([-1.0, 1.0, 0.0]))


def test_input_gradient_matches_fd():
    """Gradient of the realness logit w.r.t. RGBD input pixels, as used by R1."""
    d = make(16)
    rgb, depth = batch(1, 16)
    x = torch.cat([rgb, depth], 1).requires_grad_(True)
    (g,) = torch.autograd.grad(d.score(x[:, :3], x[:, 3:]).sum(), x)
    rng = np.random.default_rng(0)
    h = 1e-6
    for _ in range(30):
        idx = (0, int(rng.integers(4)), int(rng.integers(16)), int(rng.integers(16)))
        xp, xm = x.detach().clone(), x.detach().clone()
        xp[idx] += h
        xm[idx] -= h
        num = (d.score(xp[:, :3], xp[:, 3:]) - d.score(xm[:, :3], xm[:, 3:])).item() / (2 * h)
        assert abs(num - g[idx].item()) <= 1e-3 * max(abs(num), 1e-6) + 1e-8


def test_param_gradcheck():
    d = make(64)
    rgb, depth = batch(2, 64)
    loss = lambda: d.score(rgb, depth).pow(2).mean() + d.predict_depth(rgb).logsumexp(1).mean()
    check_param_grads(loss, d.parameters(), 40, np.random.default_rng(1))
