import numpy as np
import pytest
import torch

from fasterfc import autodiff as ad
from fasterfc.complex_ops import fftc, rss
from fasterfc.metrics import ssim
from fasterfc.simdata import MaskSpec, apply_mask, make_coils, make_mask, make_phantom, simulate_kspace, target_image
from fasterfc.unet import UNet, UNetSpec
from fasterfc.varnet import (
    VarNet,
    VarNetSpec,
    cascade_update,
    dss,
    estimate_sensitivities,
    expand,
    mask_center,
    reduce,
    refine,
    varnet_train,
)

C = torch.complex128


def crand(*shape, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.complex(torch.randn(shape, generator=g, dtype=torch.float64), torch.randn(shape, generator=g, dtype=torch.float64))


def small_kvol(seed=0, coils=3, shape=(16, 32)):
    ph, cp = make_phantom(seed, shape), make_coils(coils, shape, seed=seed)
    k = simulate_kspace(ph, cp)
    return apply_mask(k, make_mask(MaskSpec("random-1d", 4, 0.125, seed), shape[1:])), target_image(ph, cp)


def test_dss_normalizes_and_handles_zero():
    maps = crand(4, 5, 6)
    maps[:, 0, 0] = 0
    out = dss(maps)
    norm = (out.abs() ** 2).sum(0)
    assert float(norm[0, 0]) == 0
    norm[0, 0] = 1
    assert torch.allclose(norm, torch.ones_like(norm), atol=1e-6)


def test_reduce_expand_identity_under_normalized_maps():
    maps, x = dss(crand(4, 6, 7)), crand(6, 7, seed=1)
    assert float((reduce(expand(x, maps), maps) - x).abs().max()) <= 1e-10


def test_cascade_update_scalar_oracle():
    k, km, g = crand(2, 3, 4), crand(2, 3, 4, seed=1), crand(2, 3, 4, seed=2)
    mask = (torch.rand(3, 4, generator=torch.Generator().manual_seed(3)) > 0.5).double()
    eta = 0.37
    out = cascade_update(k, km, mask.expand(3, 4), eta, g)
    for idx in np.ndindex(2, 3, 4):
        m = float(mask[idx[1:]])
        ref = complex(k[idx]) - eta * m * (complex(k[idx]) - complex(km[idx])) + complex(g[idx])
        assert abs(complex(out[idx]) - ref) <= 1e-10


def test_mask_center_keeps_only_acs():
    kvol, _ = small_kvol()
    c = mask_center(kvol)
    a, b = kvol.acs.ranges[0]
    assert int(c.mask.sum()) == b - a
    assert torch.equal(c.data[..., a:b], kvol.data[..., a:b]) and float(c.data[..., :a].abs().max()) == 0


def test_untrained_sensitivities_are_normalized_acs_images():
    kvol, _ = small_kvol()
    net = VarNet(VarNetSpec(cascades=1, sens_c=2, sens_levels=1, refine_c=2, refine_levels=1)).double().sens_net
    maps = estimate_sensitivities(kvol, net)
    norm = rss(maps, 0)
    assert torch.allclose(norm[norm > 0], torch.ones_like(norm[norm > 0]), atol=1e-6)


def test_zero_regularizer_cascade_is_data_consistent_zero_fill():
    kvol, _ = small_kvol(1)
    model = VarNet(VarNetSpec(cascades=2, sens_c=2, sens_levels=1, refine_c=2, refine_levels=1)).double()
    from fasterfc.simdata import zero_filled

    assert torch.allclose(model(kvol), zero_filled(kvol), atol=1e-12)
    with pytest.raises(ValueError, match="2D"):
        model(apply_mask(crand(2, 4, 8, 8), torch.ones(8, 8, dtype=torch.float64)))


def test_cascade_gradient():
    torch.manual_seed(0)
    maps = dss(crand(2, 8, 8))
    net = UNet(UNetSpec(2, 1, 2, 2, 2, "fasterfc")).double()
    k = crand(2, 8, 8, seed=1).requires_grad_(True)
    km = crand(2, 8, 8, seed=2)
    mask = torch.tensor([1.0, 0] * 4, dtype=torch.float64).expand(8, 8)
    eta = torch.tensor(0.8, dtype=torch.float64, requires_grad=True)
    w = crand(2, 8, 8, seed=3)

    def f():
        out = cascade_update(k, km, mask, eta, refine(k, maps, net))
        return (out * w.conj()).real.sum() + out.abs().pow(2).sum()

    assert ad.fd_check(f, [k, eta] + list(net.parameters())) <= 1e-4


def test_varnet_training_improves_ssim():
    torch.manual_seed(0)
    kvol, target = small_kvol(2)
    model = VarNet(VarNetSpec(cascades=2, sens_c=2, sens_levels=1, refine_c=4, refine_levels=1, block="fasterfc")).double()
    before = ssim(model(kvol).detach(), target)
    hist = varnet_train(model, [(kvol, target)], steps=15, lr=3e-3)
    assert len(hist) == 15 and ssim(model(kvol).detach(), target) > before
