"""Unrolled variational network with learned coil sensitivities (2D).

Coils ride along the batch axis when images pass through the networks, and
complex images are fed as two real channels.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .autodiff import ParamStore
from .complex_ops import channels_to_complex, complex_to_channels, fftc, ifftc, rss
from .metrics import ssim_loss
from .simdata import KSpaceVolume
from .unet import UNet, UNetSpec

DSS_EPS = 1e-12


def mask_center(kvol: KSpaceVolume) -> KSpaceVolume:
    """Keep only the ACS block of the measured k-space."""
    if kvol.acs is None:
        raise ValueError("k-space volume carries no ACS region")
    keep = torch.zeros_like(kvol.mask)
    keep[kvol.acs.slices()] = 1
    return KSpaceVolume(kvol.data * keep.to(kvol.data.real.dtype), keep, kvol.acs, kvol.lattice)


def dss(maps: Tensor) -> Tensor:
    """Divide by the coil root-sum-of-squares; zero where every coil vanishes."""
    norm = rss(maps, dim=0)
    safe = torch.where(norm > DSS_EPS, norm, torch.ones_like(norm))
    return torch.where(norm > DSS_EPS, maps / safe, torch.zeros_like(maps))


def _apply_complex(net, z: Tensor) -> Tensor:
    """Run a real two-channel network on complex (B, *spatial) arrays."""
    return channels_to_complex(net(complex_to_channels(z.unsqueeze(1)))).squeeze(1)


class SensitivityNet(nn.Module):
    """U-Net with an identity skip; its output layer starts at zero so untrained maps are the coil images."""

    def __init__(self, spec: UNetSpec):
        super().__init__()
        self.net = UNet(spec)
        nn.init.zeros_(self.net.head.weight)
        nn.init.zeros_(self.net.head.bias)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.net(x)


def estimate_sensitivities(kvol: KSpaceVolume, net) -> Tensor:
    center = mask_center(kvol)
    images = ifftc(center.data, kvol.spatial_axes)
    return dss(_apply_complex(net, images))


def expand(x: Tensor, maps: Tensor) -> Tensor:
    return maps * x.unsqueeze(0)


def reduce(coils: Tensor, maps: Tensor) -> Tensor:
    return (maps.conj() * coils).sum(0)


def refine(k: Tensor, maps: Tensor, net) -> Tensor:
    """Regularizer term G(K): combine coils, denoise, re-expand to k-space."""
    axes = tuple(range(1, k.dim()))
    x = reduce(ifftc(k, axes), maps)
    y = _apply_complex(net, x.unsqueeze(0)).squeeze(0)
    return fftc(expand(y, maps), axes)


def cascade_update(k: Tensor, k_meas: Tensor, mask: Tensor, eta: Tensor | float, g: Tensor) -> Tensor:
    return k - eta * mask * (k - k_meas) + g


@dataclass(frozen=True)
class VarNetSpec:
    cascades: int = 12
    sens_c: int = 8
    sens_levels: int = 4
    refine_c: int = 18
    refine_levels: int = 4
    block: str = "two-conv"


class VarNet(nn.Module):
    def __init__(self, spec: VarNetSpec = VarNetSpec()):
        super().__init__()
        self.spec = spec
        self.sens_net = SensitivityNet(UNetSpec(spec.sens_c, spec.sens_levels, 2, 2, 2, spec.block))
        self.refiners = nn.ModuleList(
            UNet(UNetSpec(spec.refine_c, spec.refine_levels, 2, 2, 2, spec.block)) for _ in range(spec.cascades)
        )
        for net in self.refiners:
            # zero regularizer at start: the first forward pass is plain data consistency
            nn.init.zeros_(net.head.weight)
            nn.init.zeros_(net.head.bias)
        self.etas = nn.Parameter(torch.ones(spec.cascades))

    def forward(self, kvol: KSpaceVolume) -> Tensor:
        if kvol.ndim != 2:
            raise ValueError(f"VarNet expects 2D multi-coil k-space, got shape {tuple(kvol.data.shape)}")
        maps = estimate_sensitivities(kvol, self.sens_net)
        mask = kvol.full_mask()
        k = kvol.data
        for net, eta in zip(self.refiners, self.etas):
            k = cascade_update(k, kvol.data, mask, eta, refine(k, maps, net))
        return rss(ifftc(k, kvol.spatial_axes), dim=0)


def varnet_train(model: VarNet, data: list[tuple[KSpaceVolume, Tensor]], steps: int, lr: float = 1e-3):
    """Adam on SSIM loss against RSS targets; returns the per-step loss history."""
    store = ParamStore(model)
    history = []
    for step in range(steps):
        kvol, target = data[step % len(data)]
        loss = ssim_loss(model(kvol), target)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"VarNet loss became non-finite at step {step}")
        store.backward(loss)
        store.step("adaptive-moments", lr)
        history.append(float(loss.detach()))
    return history
