import pytest
import torch
from hypothesis import given, settings, strategies as st

from selfcollab.networks import (BACKBONES, Discriminator, GaussianConvRestorer, Generator, RestorerConfig,
                                 RestorerSnapshot, build_restorer, discriminate, generate,
                                 generator_param_count, param_hash, restore, snapshot)


def layer_count(module):
    """Independent oracle: sum of products of every parameter shape."""
    total = 0
    for p in module.parameters():
        n = 1
        for s in p.shape:
            n *= s
        total += n
    return total


def test_generator_shape_and_range():
    torch.manual_seed(0)
    g = Generator(3, 16, 2)
    x, d = torch.rand(1, 3, 64, 64), torch.rand(1, 3, 64, 64) * 2 - 1
    out = generate(g, x, d)
    assert out.shape == x.shape
    assert out.min() >= 0 and out.max() <= 1


def test_generator_rejects_mismatch():
    with pytest.raises(ValueError):
        Generator(3, 8, 1)(torch.rand(1, 3, 16, 16), torch.rand(1, 3, 16, 15))


def test_generator_trainable():
    torch.manual_seed(0)
    g = Generator(3, 8, 2)
    g(torch.rand(2, 3, 16, 16), torch.rand(2, 3, 16, 16) - 0.5).mean().backward()
    norm = sum(p.grad.norm() ** 2 for p in g.parameters() if p.grad is not None)
    assert norm > 0


@pytest.mark.parametrize("skip", [True, False])
def test_generator_param_count(skip):
    # 6 blocks, base 32, 3 -> 3 channels with the prompt concatenated
    g = Generator(3, 32, 6, prompt_skip=skip)
    n = generator_param_count(3, 32, 6, prompt_skip=skip)
    assert n == layer_count(g)
    assert n == 2 * 3 * 32 * 9 + 32 + 6 * 2 * (32 * 32 * 9 + 32) + 32 * 3 * 9 + 3 + int(skip)


def test_generator_zero_residual_paths():
    g = Generator(3, 8, 1, prompt_skip=True)
    torch.nn.init.zeros_(g.tail[1].weight)
    torch.nn.init.zeros_(g.tail[1].bias)
    x = torch.rand(1, 3, 8, 8, dtype=torch.float64) * 0.5 + 0.25
    d = (torch.rand_like(x) - 0.5) * 0.2
    g = g.double()
    assert torch.allclose(g(x, d), x + d, atol=1e-9)
    g.prompt_gain.data.zero_()
    assert torch.allclose(g(x, d), x, atol=1e-9)


def test_discriminator_patch_map():
    torch.manual_seed(0)
    d = Discriminator(3, 8, 3)
    assert d.receptive_field == 70
    s = discriminate(d, torch.rand(1, 3, 112, 112))
    assert s.shape[-1] < 112 and s.shape[-2] < 112
    s2 = discriminate(d, torch.rand(1, 3, 112, 112))
    assert not torch.equal(s, s2)


def test_discriminator_rejects_small():
    d = Discriminator(3, 8, 3)
    with pytest.raises(ValueError, match="receptive"):
        d(torch.rand(1, 3, 69, 69))


@pytest.mark.parametrize("layers", [1, 2])
def test_discriminator_shift_equivariance(layers):
    torch.manual_seed(0)
    d = Discriminator(3, 8, layers).double()
    s = d.stride
    big = torch.rand(1, 3, 64 + s, 64 + s, dtype=torch.float64)
    a = d(big[..., :64, :64])
    b = d(big[..., s:, s:])
    m = 3  # cells touched by zero padding, per side
    assert torch.allclose(b[..., m:-m - 1, m:-m - 1], a[..., m + 1:-m, m + 1:-m], atol=1e-12)


@pytest.mark.parametrize("backbone", sorted(BACKBONES))
@pytest.mark.parametrize("size", [(17, 17), (20, 31)])
def test_restorer_shape_and_identity_init(backbone, size):
    r = build_restorer(RestorerConfig(backbone, 3, 8), 3)
    y = torch.rand(2, 3, *size)
    out = restore(r, y)
    assert out.shape == y.shape
    assert torch.equal(out, y)


def test_restorer_unknown_backbone():
    with pytest.raises(ValueError):
        build_restorer(RestorerConfig("resnet", 2, 8))


def test_gaussian_conv_restorer():
    r = GaussianConvRestorer(3, 5, learnable=True)
    assert r.weight.requires_grad
    c = torch.full((1, 3, 9, 9), 0.4)
    assert torch.allclose(r(c), c, atol=1e-6)
    assert not GaussianConvRestorer(3, 5, learnable=False).weight.requires_grad


def _trained_step(r):
    opt = torch.optim.SGD(r.parameters(), lr=0.1)
    y = torch.rand(2, 3, 12, 12)
    ((r(y) - 0.5) ** 2).mean().backward()
    opt.step()


def test_snapshot_isolation():
    torch.manual_seed(0)
    r = build_restorer(RestorerConfig("tiny_cnn", 3, 8))
    _trained_step(r)  # move off the identity init
    snap = snapshot(r)
    probe = torch.rand(1, 3, 12, 12)
    before_r, before_s = r(probe).detach(), snap(probe)
    _trained_step(r)
    assert torch.equal(snap(probe), before_s)
    assert not torch.equal(r(probe), before_r)
    assert snap.current_hash() == snap.param_hash


def test_snapshot_matches_source_on_probes():
    torch.manual_seed(1)
    r = build_restorer(RestorerConfig("dncnn_like", 4, 8))
    _trained_step(r)
    r.eval()
    snap = snapshot(r)
    for _ in range(10):
        y = torch.rand(1, 3, 16, 16)
        assert torch.equal(snap(y), r(y))


def test_snapshot_frozen_and_deterministic():
    torch.manual_seed(0)
    r = build_restorer(RestorerConfig("tiny_cnn", 3, 8))
    _trained_step(r)
    snap = snapshot(r)
    y = torch.rand(1, 3, 12, 12, requires_grad=True)
    out = snap(y)
    assert torch.equal(out, snap(y))
    out.sum().backward()
    assert all(p.grad is None and not p.requires_grad for p in snap.parameters())
    assert y.grad is not None


def test_snapshot_is_terminal():
    snap = snapshot(build_restorer(RestorerConfig()))
    with pytest.raises(TypeError):
        snapshot(snap)
    assert isinstance(snap, RestorerSnapshot)


def test_param_hash_changes_with_weights():
    r = build_restorer(RestorerConfig("tiny_cnn", 2, 4))
    h = param_hash(r)
    with torch.no_grad():
        next(r.parameters()).add_(1e-3)
    assert param_hash(r) != h


@settings(max_examples=15, deadline=None)
@given(st.integers(16, 40), st.integers(16, 40), st.sampled_from(sorted(BACKBONES)))
def test_shape_preservation_property(h, w, backbone):
    torch.manual_seed(0)
    r = build_restorer(RestorerConfig(backbone, 2, 4), 1)
    g = Generator(1, 4, 1)
    y = torch.rand(1, 1, h, w)
    assert r(y).shape == y.shape
    assert g(y, y - 0.5).shape == y.shape
