import pytest
import torch

from fasterfc import autodiff as ad
from fasterfc.complex_ops import rss
from fasterfc.fasnet import (
    FasNet,
    FasNetSpec,
    cascade_refine,
    estimate_sensitivities_3d,
    fuse_coils,
    make_items,
    merge_ranges,
    merge_slices,
    split_slices,
    fasnet_train,
)
from fasterfc.unet import UNet, UNetSpec
from fasterfc.varnet import SensitivityNet


def crand(*shape, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.complex(torch.randn(shape, generator=g, dtype=torch.float64), torch.randn(shape, generator=g, dtype=torch.float64))


SMALL = FasNetSpec(L=4, cascades=2, sens_c=2, sens_levels=1, refine_c=2, refine_levels=1)


def test_split_counts_and_partition():
    vol = torch.arange(320.0).reshape(320, 1, 1)
    blocks = split_slices(vol, 16)
    assert len(blocks) == 39
    assert [b.role for b in blocks][:2] == ["first", "interior"] and blocks[-1].role == "last"
    ranges = merge_ranges([b.start for b in blocks], 16, 320)
    sizes = [b - a for a, b in ranges]
    assert sizes[0] == 12 and sizes[-1] == 12 and set(sizes[1:-1]) == {8} and sum(sizes) == 320
    assert torch.equal(merge_slices(blocks, 320), vol)


def test_single_block_is_whole_volume():
    vol = crand(3, 8, 4, 4)
    blocks = split_slices(vol, 8)
    assert len(blocks) == 1 and torch.equal(merge_slices(blocks, 8), vol)


def test_split_errors():
    with pytest.raises(ValueError, match="multiple of 4"):
        split_slices(torch.zeros(12, 2, 2), 6)
    with pytest.raises(ValueError, match="pad F to 24"):
        split_slices(torch.zeros(21, 2, 2), 8)
    blocks = split_slices(torch.zeros(16, 2, 2), 8)
    with pytest.raises(ValueError, match="complete split"):
        merge_slices(blocks[:-1], 16)


def test_untrained_network_returns_rss_of_input():
    vol = crand(3, 8, 4, 4)
    model = FasNet(SMALL).double()
    with torch.no_grad():
        assert torch.allclose(model.reconstruct(vol), rss(vol, 0), atol=1e-12)


def test_sensitivities_and_fusion():
    block = crand(3, 4, 4, 4)
    net = SensitivityNet(UNetSpec(2, 1, 2, 2, 3, "fasterfc")).double()
    maps = estimate_sensitivities_3d(block, net)
    assert torch.allclose(rss(maps, 0), torch.ones(4, 4, 4, dtype=torch.float64), atol=1e-6)
    with pytest.raises(ValueError, match="differ"):
        fuse_coils(block, maps[:2])


def test_cascade_gradient():
    torch.manual_seed(0)
    nets = [UNet(UNetSpec(2, 1, 2, 2, 3, "fasterfc")).double() for _ in range(2)]
    x = crand(4, 4, 4).requires_grad_(True)
    w = crand(4, 4, 4, seed=1)
    f = lambda: (cascade_refine(x, nets) * w.conj()).real.sum()  # noqa: E731
    params = [x] + [p for n in nets for p in n.parameters()]
    assert ad.fd_check(f, params) <= 1e-4


def test_block_forward_gradient():
    torch.manual_seed(1)
    model = FasNet(SMALL).double()
    with torch.no_grad():
        for n in model.refiners:
            n.head.weight.normal_()
        model.sens_net.net.head.weight.normal_()
    block = crand(2, 4, 4, 4).requires_grad_(True)
    f = lambda: model.forward_block(block).abs().pow(2).sum()  # noqa: E731
    assert ad.fd_check(f, [block] + list(model.parameters())) <= 1e-4


def test_training_is_seeded_and_finite():
    vol = crand(2, 8, 8, 8)
    target = rss(vol, 0) * 1.1
    items = make_items([(vol, target)], 4)
    assert len(items) == 3 and items[0].data_range == float(target.max())

    def run():
        torch.manual_seed(0)
        return fasnet_train(FasNet(SMALL).double(), items, epochs=1, epochs_late=1, seed=3)

    a = run()
    assert a == run() and len(a) == 6 and all(map(lambda v: v == v, a))
