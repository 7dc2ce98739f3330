import numpy as np
import pytest
import torch

from fasterfc import autodiff as ad
from fasterfc.blocks import FasterFCBlock, FFCBlock, TwoConvBlock, make_block, receptive_field_probe
from oracles import circular_conv, idft_explicit, spectral_branch_oracle

D = torch.float64


def rand(*shape, seed=0):
    return torch.randn(shape, generator=torch.Generator().manual_seed(seed), dtype=D)


@pytest.mark.parametrize("kind", ["two-conv", "ffc", "fasterfc"])
@pytest.mark.parametrize("ndim", [2, 3])
def test_shape_contract(kind, ndim):
    blk = make_block(kind, 3, 8, ndim).double()
    x = rand(2, 3, *([8] * ndim))
    assert blk(x).shape == (2, 8) + (8,) * ndim
    with pytest.raises(ValueError, match="expects"):
        blk(rand(2, 4, *([8] * ndim)))


def test_make_block_rejects_unknown_and_odd_width():
    with pytest.raises(ValueError, match="unknown block"):
        make_block("dense", 2, 2)
    with pytest.raises(ValueError, match="even"):
        FasterFCBlock(2, 5)


def test_stages_and_fused_output_agree():
    torch.manual_seed(1)
    blk = FasterFCBlock(3, 6).double()
    x = rand(1, 3, 10, 12)
    st = blk(x, return_stages=True)
    assert torch.allclose(st["f_output"], blk(x), atol=1e-12)
    assert st["f34"].shape[1] == 12
    assert torch.allclose(st["f2"] - st["f1"], blk.local(st["f1"]))


def test_conv_theorem_against_brute_force():
    """Pointwise product of unitary spectra is circular convolution with the inverse-DFT kernel."""
    x = (rand(5, 6) + 1j * rand(5, 6, seed=1)).to(torch.complex128)
    H = (rand(5, 6, seed=2) + 1j * rand(5, 6, seed=3)).numpy()
    via_fft = ad.ifft_nd(torch.from_numpy(H) * ad.fft_nd(x, (0, 1)), (0, 1)).numpy()
    direct = circular_conv(idft_explicit(H), x.numpy())
    assert np.abs(via_fft - direct).max() <= 1e-6 * np.abs(direct).max()


@pytest.mark.parametrize("shape", [(1, 4, 6, 5), (1, 4, 4, 3, 3)])
def test_spectral_branch_matches_oracle(shape):
    torch.manual_seed(2)
    blk = FasterFCBlock(shape[1], 4, len(shape) - 2).double()
    blk.set_test_mode(bypass_norm=True, slope=1.0)
    with torch.no_grad():
        st = blk(rand(*shape), return_stages=True)
    got = (st["f4"] - st["f3"]).numpy()
    got = got[0, :2] + 1j * got[0, 2:]
    ref = spectral_branch_oracle(blk, st["f3"])
    assert np.abs(got - ref).max() <= 1e-6 * np.abs(ref).max()


def test_fasterfc_uses_one_round_trip_ffc_two():
    x = rand(1, 4, 8, 8)
    with ad.count_transforms() as c:
        FasterFCBlock(4, 4).double()(x)
    assert (c.forward, c.inverse) == (1, 1)
    with ad.count_transforms() as c:
        FFCBlock(4, 4).double()(x)
    assert (c.forward, c.inverse) == (2, 2)


def test_receptive_fields():
    torch.manual_seed(3)
    fast = FasterFCBlock(2, 4).double()
    assert bool(receptive_field_probe(fast, (1, 2, 16, 16)).all())
    two = TwoConvBlock(2, 4).double()
    two.set_test_mode(bypass_norm=True)
    infl = receptive_field_probe(two, (1, 2, 16, 16))
    box = torch.zeros(16, 16, dtype=torch.bool)
    box[6:11, 6:11] = True
    assert torch.equal(infl, box)
    two3 = TwoConvBlock(2, 4, ndim=3).double()
    two3.set_test_mode(bypass_norm=True)
    infl3 = receptive_field_probe(two3, (1, 2, 9, 9, 9))
    box3 = torch.zeros(9, 9, 9, dtype=torch.bool)
    box3[2:7, 2:7, 2:7] = True
    assert torch.equal(infl3, box3)


@pytest.mark.parametrize(
    "kind,ndim,spatial", [("fasterfc", 2, (6, 6)), ("fasterfc", 3, (4, 4, 4)), ("ffc", 2, (6, 6)), ("two-conv", 2, (5, 5))]
)
def test_block_gradients(kind, ndim, spatial):
    torch.manual_seed(4)
    blk = make_block(kind, 2, 4, ndim).double()
    x = rand(1, 2, *spatial).requires_grad_(True)
    w = rand(1, 4, *spatial, seed=9)
    params = [x] + list(blk.parameters())
    assert ad.fd_check(lambda: (blk(x) * w).sum(), params) <= 1e-4


def test_flops_count_matches_conv_arithmetic():
    blk = TwoConvBlock(4, 8)
    conv = 2 * 36 * 8 * (4 * 9) + 2 * 36 * 8 * (8 * 9)
    assert blk.flops((6, 6)) == conv + 2 * (8 + 1) * 36 * 8


def test_identity_spectral_stage_doubles_f3():
    blk = FasterFCBlock(4, 4).double()
    blk.set_test_mode(bypass_norm=True, slope=1.0)
    with torch.no_grad():
        blk.spectral.conv.weight.copy_(torch.eye(4, dtype=D).reshape(4, 4, 1, 1))
        blk.spectral.conv.bias.zero_()
        st = blk(rand(1, 4, 6, 7), return_stages=True)
    assert torch.allclose(st["f4"], 2 * st["f3"], atol=1e-12)
