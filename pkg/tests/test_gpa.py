import pytest
import torch

from fbchain.errors import ConfigError, NumericError, ShapeError
from fbchain.gpa import (
    GlobalContext,
    GlobalPyramidAttention,
    PairFuse,
    PyramidAttention,
    PyramidBuilder,
    correlation,
    gpa_forward,
    upsample,
)
from helpers import fd_probe, randomize_


def test_pyramid_shapes():
    pyr = PyramidBuilder(64)(torch.randn(1, 64, 4, 4))
    assert {r: tuple(f.shape) for r, f in pyr.items()} == {
        1: (1, 64, 4, 4), 2: (1, 32, 8, 8), 4: (1, 16, 16, 16), 8: (1, 8, 32, 32)}


def test_pyramid_constant_input_stays_constant():
    pb = PyramidBuilder(8).double()
    pyr = pb(torch.full((1, 8, 3, 3), 2.0, dtype=torch.float64))
    for f in pyr.values():
        flat = f.flatten(2)
        assert torch.allclose(flat, flat[..., :1].expand_as(flat), atol=1e-12)


def test_bilinear_hand_example():
    x = torch.tensor([[[[0.0, 1.0], [0.0, 1.0]]]])
    out = upsample(x, 2)[0, 0]
    # half-pixel centres: sample x = -0.25, 0.25, 0.75, 1.25 clamped to [0, 1]
    expected_row = torch.tensor([0.0, 0.25, 0.75, 1.0])
    for r in range(4):
        assert torch.allclose(out[r], expected_row)


def test_reduce_then_upsample_matches_upsample_then_reduce():
    torch.manual_seed(0)
    pb = PyramidBuilder(16).double()
    x = torch.randn(2, 16, 4, 4, dtype=torch.float64)
    for r in (2, 4, 8):
        ref = pb.reduce[str(r)](upsample(x, r))
        assert torch.allclose(pb(x)[r], ref, atol=1e-12)


def test_pair_fuse_shape():
    assert PairFuse(16)(torch.randn(1, 16, 16, 16), torch.randn(1, 8, 32, 32)).shape == (1, 16, 16, 16)


def test_pair_fuse_scale_ratio_checked():
    with pytest.raises(ShapeError, match="ratio"):
        PairFuse(16)(torch.randn(1, 16, 16, 16), torch.randn(1, 8, 24, 24))
    with pytest.raises(ShapeError, match="channel"):
        PairFuse(16)(torch.randn(1, 16, 16, 16), torch.randn(1, 16, 32, 32))


def test_pair_fuse_branches_agree_on_nearest_upsample():
    pf = PairFuse(8).double()
    pf.force_masks = 1.0
    with torch.no_grad():
        pf.gate_proj.weight.copy_(torch.eye(8).view(8, 8, 1, 1))
    f_d = torch.randn(1, 8, 4, 4, dtype=torch.float64)
    f_2d = torch.nn.functional.interpolate(f_d[:, :4], scale_factor=2, mode="nearest")
    coarse, fine = pf.branches(f_d, f_2d)
    assert torch.allclose(coarse[:, :4], fine, atol=1e-12)


def test_pair_fuse_zero_masks_give_bias_map():
    pf = PairFuse(8)
    pf.force_masks = 0.0
    out = pf(torch.randn(2, 8, 4, 4), torch.randn(2, 4, 8, 8))
    assert torch.equal(out, pf.out.bias.view(1, 8, 1, 1).expand(2, 8, 4, 4))


def test_ppa_returns_top_shape_and_two_scale_recursion(monkeypatch):
    ppa = PyramidAttention(64)
    assert ppa(torch.randn(1, 64, 4, 4)).shape == (1, 64, 4, 4)
    small = PyramidAttention(8, scales=(1, 2))
    calls = []
    orig = PairFuse.forward
    monkeypatch.setattr(PairFuse, "forward", lambda self, a, b: calls.append(1) or orig(self, a, b))
    small(torch.randn(1, 8, 4, 4))
    assert len(calls) == 1


def test_pyramid_scales_validated():
    with pytest.raises(ConfigError):
        PyramidBuilder(8, (1, 3))
    with pytest.raises(ConfigError):
        PyramidBuilder(12, (1, 2, 4, 8))


def test_ppa_gradients_tiny():
    torch.manual_seed(0)
    ppa = PyramidAttention(8).double()
    randomize_(ppa, 5)
    x = torch.randn(1, 8, 2, 2, dtype=torch.float64, requires_grad=True)
    w = torch.randn(1, 8, 2, 2, dtype=torch.float64)
    res = fd_probe(lambda: (ppa(x) * w).sum(), list(ppa.parameters()) + [x], 25, seed=1)
    assert max(r for _, _, r in res) <= 1e-3


def test_gcm_alpha_zero_identity():
    f = torch.randn(2, 5, 3, 3)
    assert torch.equal(GlobalContext(0.0)(f), f)


def test_gcm_hand_example():
    g = GlobalContext()
    f = torch.tensor([[[[1.0, 0.0], [0.0, 0.0]]]])
    f_c, f_g = g.context(f)
    expected = torch.zeros(1, 4, 4)
    expected[0, 0, 0] = 1.0
    assert torch.equal(f_c, expected)
    assert torch.equal(f_g, f)


def test_gcm_constant_per_channel():
    g = GlobalContext().double()
    f = torch.randn(1, 4, 1, 1, dtype=torch.float64).expand(1, 4, 3, 3).contiguous()
    f_c, f_g = g.context(f)
    assert torch.allclose(f_c, f_c[0, 0, 0].expand_as(f_c), atol=1e-12)
    flat = f_g.flatten(2)
    assert torch.allclose(flat, flat[..., :1].expand_as(flat), atol=1e-12)


def test_correlation_symmetric():
    r = torch.randn(2, 3, 4, 4)
    c = correlation(r)
    assert torch.allclose(c, c.transpose(1, 2))


def test_gcm_overflow_raises():
    g = GlobalContext()
    g.normalize = False
    with pytest.raises(NumericError):
        g.context(torch.full((1, 2, 4, 4), 1e30))


def test_gpa_modes():
    x = torch.randn(1, 64, 4, 4)
    assert gpa_forward(x, GlobalPyramidAttention(64, "off")) is x
    assert torch.equal(GlobalPyramidAttention(64, "gcm_only")(x), x)
    assert GlobalPyramidAttention(64, "full")(x).shape == (1, 64, 4, 4)
    with pytest.raises(ConfigError):
        GlobalPyramidAttention(64, "both")


def test_gcm_gradients():
    g = GlobalContext(0.7).double()
    f = torch.randn(2, 4, 3, 3, dtype=torch.float64, requires_grad=True)
    w = torch.randn(2, 4, 3, 3, dtype=torch.float64)
    res = fd_probe(lambda: (g(f) * w).sum(), [g.alpha, f], 25, seed=2)
    assert max(r for _, _, r in res) <= 1e-3
