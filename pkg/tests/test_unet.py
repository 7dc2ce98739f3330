import pytest
import torch

from fasterfc import autodiff as ad
from fasterfc.unet import (
    UNet,
    UNetSpec,
    count_params_actual,
    count_params_closed_form,
    cross_domain_pool,
    cross_domain_upsample,
    flops_estimate,
    param_ratio,
)

D = torch.float64


@pytest.mark.parametrize("block", ["two-conv", "ffc", "fasterfc"])
@pytest.mark.parametrize("ndim", [2, 3])
def test_forward_shapes(block, ndim):
    net = UNet(UNetSpec(4, 2, 1, 3, ndim, block)).double()
    x = torch.randn((2, 1) + (8,) * ndim, dtype=D)
    assert net(x).shape == (2, 3) + (8,) * ndim


def test_extents_must_divide():
    net = UNet(UNetSpec(4, 2))
    with pytest.raises(ValueError, match="pad to \\(12, 8\\)"):
        net(torch.randn(1, 1, 10, 8))


def test_closed_forms_close_to_enumeration():
    for kind, block in (("unet", "two-conv"), ("fasterfc-unet", "fasterfc")):
        gaps = []
        for c in (8, 16, 32):
            actual = count_params_actual(UNet(UNetSpec(c, 4, 1, 1, 2, block)))
            closed = count_params_closed_form(kind, c, 4)
            gaps.append(abs(actual - closed) / closed)
        # the closed forms omit only terms linear in c, so the gap shrinks with width
        assert gaps[0] > gaps[1] > gaps[2] and gaps[2] < 0.005, (kind, gaps)


def test_param_ratio_anchor():
    assert param_ratio(32, 4) == pytest.approx(0.86, abs=0.01)
    with pytest.raises(ValueError):
        count_params_closed_form("unet", 0, 4)


def test_cross_domain_resampling_is_image_domain_pooling():
    k = torch.randn(1, 2, 8, 8, dtype=torch.complex128)
    down = cross_domain_pool(k)
    assert down.shape == (1, 2, 4, 4)
    # upsample then pool is the identity in either domain
    assert (cross_domain_pool(cross_domain_upsample(down)) - down).abs().max() < 1e-12


def test_cross_domain_unet_runs_and_counts_flops():
    net = UNet(UNetSpec(4, 2, 4, 4, 3, "two-conv", "cross-domain")).double()
    assert net(torch.randn(1, 4, 8, 8, 8, dtype=D)).shape == (1, 4, 8, 8, 8)
    assert flops_estimate(net, (1, 4, 8, 8, 8)) > 0


def test_unet_gradient():
    torch.manual_seed(0)
    net = UNet(UNetSpec(2, 1, 1, 1, 2, "fasterfc")).double()
    x = torch.randn(1, 1, 4, 4, dtype=D, requires_grad=True)
    w = torch.randn(1, 1, 4, 4, dtype=D)
    assert ad.fd_check(lambda: (net(x) * w).sum(), [x] + list(net.parameters())) <= 1e-4


def test_ratio_below_one_over_plotted_range():
    assert all(param_ratio(c, L) < 1 for c in range(8, 65) for L in range(2, 6))
