"""Encoder-decoder networks built from interchangeable blocks.

One block of the chosen kind sits at every encoder and decoder level where
a classic U-Net has two consecutive 3x3 convolutions.  Downsampling is
parameter-free 2x average pooling and upsampling is a 2x2 stride-2
transposed convolution followed by norm and leaky ReLU, unless the
cross-domain resampling of the k-space network is selected.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
from torch import Tensor, nn

from .autodiff import avg_pool_nd, conv_transpose_nd, leaky_relu, nn_upsample_nd
from .blocks import DEFAULT_SLOPE, Conv, InstanceNorm, fft_flops, make_block
from .complex_ops import channels_to_complex, complex_to_channels, fftc, ifftc


@dataclass(frozen=True)
class UNetSpec:
    c: int = 32
    levels: int = 4
    in_channels: int = 1
    out_channels: int = 1
    ndim: int = 2
    block: str = "two-conv"
    resample: str = "pool"  # or "cross-domain"
    slope: float = DEFAULT_SLOPE

    def channels(self, level: int) -> int:
        return self.c * 2**level


class UpConv(nn.Module):
    def __init__(self, ndim: int, cin: int, cout: int, slope: float):
        super().__init__()
        self.ndim, self.cin, self.cout = ndim, cin, cout
        self.weight = nn.Parameter(torch.empty((cin, cout) + (2,) * ndim))
        self.bias = nn.Parameter(torch.empty(cout))
        self.norm = InstanceNorm(cout)
        self.slope = slope
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))
        bound = 1 / math.sqrt(cout * 2**ndim)
        nn.init.uniform_(self.bias, -bound, bound)

    def forward(self, x: Tensor) -> Tensor:
        return leaky_relu(self.norm(conv_transpose_nd(x, self.weight, self.bias)), self.slope)

    def flops(self, spatial: Sequence[int]) -> float:
        n_in = math.prod(spatial)
        n_out = n_in * 2**self.ndim
        return 2.0 * n_in * self.cin * self.cout * 2**self.ndim + n_out * self.cout * (2 + 8)


def cross_domain_pool(k: Tensor) -> Tensor:
    """k-space (B, C, *spatial) complex -> image domain -> 2x mean pool -> k-space."""
    axes = tuple(range(2, k.dim()))
    return fftc(avg_pool_nd(ifftc(k, axes), 2), axes)


def cross_domain_upsample(k: Tensor) -> Tensor:
    axes = tuple(range(2, k.dim()))
    return fftc(nn_upsample_nd(ifftc(k, axes), 2), axes)


def _on_channels(op, f: Tensor) -> Tensor:
    # real feature channels are paired as complex k-space, as in the spectral block
    return complex_to_channels(op(channels_to_complex(f)))


class UNet(nn.Module):
    def __init__(self, spec: UNetSpec):
        super().__init__()
        if spec.resample not in ("pool", "cross-domain"):
            raise ValueError(f"unknown resampling {spec.resample!r}")
        self.spec = spec
        L, nd, kind = spec.levels, spec.ndim, spec.block
        self.down = nn.ModuleList([make_block(kind, spec.in_channels, spec.c, nd, slope=spec.slope)])
        for i in range(1, L + 1):
            self.down.append(make_block(kind, spec.channels(i - 1), spec.channels(i), nd, slope=spec.slope))
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        for i in range(L, 0, -1):
            hi, lo = spec.channels(i), spec.channels(i - 1)
            if spec.resample == "pool":
                self.up.append(UpConv(nd, hi, lo, spec.slope))
                self.dec.append(make_block(kind, 2 * lo, lo, nd, slope=spec.slope))
            else:
                self.up.append(nn.Identity())
                self.dec.append(make_block(kind, hi + lo, lo, nd, slope=spec.slope))
        self.head = Conv(nd, spec.c, spec.out_channels, 1)

    def check_extents(self, spatial: Sequence[int]) -> None:
        m = 2**self.spec.levels
        if any(s % m for s in spatial):
            padded = tuple(-(-s // m) * m for s in spatial)
            raise ValueError(
                f"spatial extents {tuple(spatial)} must be divisible by 2^{self.spec.levels}={m}; "
                f"pad to {padded}"
            )

    def _down(self, x: Tensor) -> Tensor:
        if self.spec.resample == "pool":
            return avg_pool_nd(x, 2)
        return _on_channels(cross_domain_pool, x)

    def _up(self, i: int, x: Tensor) -> Tensor:
        if self.spec.resample == "pool":
            return self.up[i](x)
        return _on_channels(cross_domain_upsample, x)

    def forward(self, x: Tensor) -> Tensor:
        if x.dim() != self.spec.ndim + 2:
            raise ValueError(f"expected {self.spec.ndim} spatial axes, got shape {tuple(x.shape)}")
        self.check_extents(x.shape[2:])
        skips = []
        out = x
        for i, block in enumerate(self.down):
            if i:
                out = self._down(out)
            out = block(out)
            skips.append(out)
        skips.pop()
        for i, block in enumerate(self.dec):
            out = torch.cat([self._up(i, out), skips.pop()], dim=1)
            out = block(out)
        return self.head(out)

    def flops(self, spatial: Sequence[int]) -> float:
        self.check_extents(spatial)
        sizes = [tuple(s // 2**i for s in spatial) for i in range(self.spec.levels + 1)]
        total = 0.0
        for i, block in enumerate(self.down):
            if i:
                total += math.prod(sizes[i - 1]) * block.in_channels  # pooling adds
                if self.spec.resample == "cross-domain":
                    total += block.in_channels // 2 * (fft_flops(sizes[i - 1]) + fft_flops(sizes[i]))
            total += block.flops(sizes[i])
        for j, block in enumerate(self.dec):
            level = self.spec.levels - 1 - j
            if self.spec.resample == "pool":
                total += self.up[j].flops(sizes[level + 1])
            else:
                ch = self.spec.channels(level + 1) // 2
                total += ch * (fft_flops(sizes[level + 1]) + fft_flops(sizes[level]))
            total += block.flops(sizes[level])
        return total + self.head.flops(spatial)


def build_unet(spec: UNetSpec) -> UNet:
    return UNet(spec)


def count_params_actual(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def flops_estimate(net: UNet, input_shape: Sequence[int]) -> float:
    """Analytic GFLOPs for one sample; ``input_shape`` may include (B, C) or be spatial only."""
    spatial = tuple(input_shape[-net.spec.ndim :])
    batch = input_shape[0] if len(input_shape) == net.spec.ndim + 2 else 1
    return batch * net.flops(spatial) / 1e9


def _fasterfc_unet_closed_form(c: int, L: int) -> int:
    n = 4 * c + 4 * c * c + (c * c) * 9
    for i in range(1, L + 1):
        lo, hi = 2 ** (i - 1) * c, 2**i * c
        n += lo * hi + 4 * hi * hi + hi * hi * 9
        n += hi * lo + 4 * lo * lo + lo * lo * 9
        n += hi * lo * 4
    return n


def _unet_closed_form(c: int, L: int) -> int:
    n = 2 * c + c * c
    for i in range(1, L):
        n += 2 ** (i - 1) * c * 2**i * c + 2**i * c * 2**i * c
    n *= 9
    n += 2 * c
    n += 9 * sum(2**i * c * 2 ** (i - 1) * c + (2 ** (i - 1) * c) ** 2 for i in range(1, L + 1))
    n += 9 * (2 ** (L - 1) * c * 2**L * c + (2**L * c) ** 2)
    n += 4 * sum(2**i * c * 2 ** (i - 1) * c for i in range(1, L + 1))
    return n


def count_params_closed_form(kind: str, c: int, L: int) -> int:
    """Printed closed-form parameter counts for an L-level network of entry width c."""
    if c < 1 or L < 1:
        raise ValueError(f"closed forms need c >= 1 and L >= 1, got c={c}, L={L}")
    if kind == "unet":
        return _unet_closed_form(c, L)
    if kind == "fasterfc-unet":
        return _fasterfc_unet_closed_form(c, L)
    raise ValueError(f"no closed form for {kind!r}; expected 'unet' or 'fasterfc-unet'")


def param_ratio(c: int, L: int) -> float:
    return count_params_closed_form("fasterfc-unet", c, L) / count_params_closed_form("unet", c, L)
