"""FasterFC, FFC and two-convolution blocks (2D and 3D).

All three blocks share the same contract: ``(B, C_in, *spatial)`` real in,
``(B, C_out, *spatial)`` real out, spatial extents preserved.  Each block also
reports an analytic FLOP count for a given input so the U-Net builder can
sum them without running anything.
"""
from __future__ import annotations

import math
from typing import Callable, Sequence

import torch
from torch import Tensor, nn

from .autodiff import (
    conv_nd,
    fft_nd,
    ifft_nd,
    instance_norm,
    irfft_nd,
    leaky_relu,
    rfft_nd,
)
from .complex_ops import channels_to_complex, complex_to_channels

__all__ = [
    "Conv",
    "InstanceNorm",
    "FasterFCBlock",
    "FFCBlock",
    "TwoConvBlock",
    "channels_to_complex",
    "complex_to_channels",
    "receptive_field_probe",
    "make_block",
]

DEFAULT_SLOPE = 0.2
NORM_FLOPS = 8  # mean, variance, standardize, affine per element
FFT_FLOPS = 5  # times N log2 N per complex transform


def fft_flops(spatial: Sequence[int], real_input: bool = False) -> float:
    n = math.prod(spatial)
    f = FFT_FLOPS * n * math.log2(n) if n > 1 else 0.0
    return f / 2 if real_input else f


class Conv(nn.Module):
    """Zero-padded 'same' convolution with an optional bias."""

    def __init__(self, ndim: int, cin: int, cout: int, kernel: int = 1, bias: bool = True):
        super().__init__()
        self.ndim, self.cin, self.cout, self.kernel = ndim, cin, cout, kernel
        self.weight = nn.Parameter(torch.empty((cout, cin) + (kernel,) * ndim))
        self.bias = nn.Parameter(torch.empty(cout)) if bias else None
        self.reset_parameters()

    def reset_parameters(self) -> None:
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))
        if self.bias is not None:
            fan_in = self.cin * self.kernel**self.ndim
            bound = 1 / math.sqrt(fan_in) if fan_in > 0 else 0
            nn.init.uniform_(self.bias, -bound, bound)

    def forward(self, x: Tensor) -> Tensor:
        return conv_nd(x, self.weight, self.bias, padding=self.kernel // 2)

    def flops(self, spatial: Sequence[int]) -> float:
        n = math.prod(spatial)
        f = 2.0 * n * self.cout * self.cin * self.kernel**self.ndim
        return f + (n * self.cout if self.bias is not None else 0)


class InstanceNorm(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.scale = nn.Parameter(torch.ones(channels))
        self.shift = nn.Parameter(torch.zeros(channels))
        self.bypass = False

    def forward(self, x: Tensor) -> Tensor:
        if self.bypass:
            return x
        return instance_norm(x, self.scale, self.shift)

    def flops(self, spatial: Sequence[int]) -> float:
        return NORM_FLOPS * math.prod(spatial) * self.channels


class Stage(nn.Module):
    """conv -> instance norm -> leaky ReLU"""

    def __init__(self, ndim: int, cin: int, cout: int, kernel: int, slope: float, bias: bool = True):
        super().__init__()
        self.conv = Conv(ndim, cin, cout, kernel, bias)
        self.norm = InstanceNorm(cout)
        self.slope = slope

    def forward(self, x: Tensor) -> Tensor:
        return leaky_relu(self.norm(self.conv(x)), self.slope)

    def flops(self, spatial: Sequence[int]) -> float:
        n = math.prod(spatial) * self.conv.cout
        return self.conv.flops(spatial) + self.norm.flops(spatial) + n


class _Block(nn.Module):
    in_channels: int
    out_channels: int
    ndim: int

    def set_test_mode(self, bypass_norm: bool = True, slope: float | None = None) -> None:
        """Bypass every normalization and optionally force one activation slope."""
        for m in self.modules():
            if isinstance(m, InstanceNorm):
                m.bypass = bypass_norm
            if slope is not None and hasattr(m, "slope"):
                m.slope = slope

    def _check(self, x: Tensor) -> None:
        if x.dim() != self.ndim + 2 or x.shape[1] != self.in_channels:
            raise ValueError(
                f"{type(self).__name__} expects (B, {self.in_channels}, {self.ndim} spatial axes), "
                f"got {tuple(x.shape)}"
            )


class FasterFCBlock(_Block):
    """Faster Fourier convolution block.

    entry 1x1 -> local 3x3 (+res) -> mid 1x1 -> spectral 1x1 in the Fourier
    domain (+res) -> concat -> output 1x1.  The spectral stage pairs channel
    halves as complex values, transforms over all spatial axes, and runs its
    convolution, normalization and activation on the real/imaginary planes
    stacked back as channels.
    """

    def __init__(self, in_channels: int, out_channels: int, ndim: int = 2, slope: float = DEFAULT_SLOPE):
        super().__init__()
        if out_channels % 2:
            raise ValueError(f"FasterFC needs an even channel count, got {out_channels}")
        self.in_channels, self.out_channels, self.ndim = in_channels, out_channels, ndim
        c = out_channels
        self.entry = Stage(ndim, in_channels, c, 1, slope)
        self.local = Stage(ndim, c, c, 3, slope)
        self.mid = Stage(ndim, c, c, 1, slope)
        self.spectral = Stage(ndim, c, c, 1, slope)
        self.fuse = Stage(ndim, 2 * c, c, 1, slope)

    def forward(self, x: Tensor, return_stages: bool = False):
        self._check(x)
        axes = tuple(range(2, 2 + self.ndim))
        f1 = self.entry(x)
        f2 = self.local(f1) + f1
        f3 = self.mid(f2)
        spec = complex_to_channels(fft_nd(channels_to_complex(f3), axes))
        spec = self.spectral(spec)
        f4 = complex_to_channels(ifft_nd(channels_to_complex(spec), axes)) + f3
        if return_stages:
            f34 = torch.cat([f3, f4], dim=1)
            return {"f1": f1, "f2": f2, "f3": f3, "f4": f4, "f34": f34, "f_output": self.fuse(f34)}
        # 1x1 conv of the concatenation == sum of 1x1 convs on its halves, without the copy
        c = self.out_channels
        w, fuse = self.fuse.conv.weight, self.fuse
        z = conv_nd(f3, w[:, :c], fuse.conv.bias) + conv_nd(f4, w[:, c:])
        return leaky_relu(fuse.norm(z), fuse.slope)

    def flops(self, spatial: Sequence[int]) -> float:
        n = math.prod(spatial) * self.out_channels
        total = sum(s.flops(spatial) for s in (self.entry, self.local, self.mid, self.spectral, self.fuse))
        total += 2 * n  # two residual additions
        total += 2 * (self.out_channels // 2) * fft_flops(spatial)
        return total


class TwoConvBlock(_Block):
    """Two consecutive 3x3(x3) convolutions, each followed by norm and leaky ReLU."""

    def __init__(self, in_channels: int, out_channels: int, ndim: int = 2, slope: float = DEFAULT_SLOPE):
        super().__init__()
        self.in_channels, self.out_channels, self.ndim = in_channels, out_channels, ndim
        self.first = Stage(ndim, in_channels, out_channels, 3, slope, bias=False)
        self.second = Stage(ndim, out_channels, out_channels, 3, slope, bias=False)

    def forward(self, x: Tensor) -> Tensor:
        self._check(x)
        return self.second(self.first(x))

    def flops(self, spatial: Sequence[int]) -> float:
        return self.first.flops(spatial) + self.second.flops(spatial)


# --- FFC baseline ---------------------------------------------------------

class FourierUnit(nn.Module):
    """rFFT -> 1x1 conv on stacked real/imag -> norm -> ReLU -> irFFT."""

    def __init__(self, ndim: int, channels: int):
        super().__init__()
        self.ndim, self.channels = ndim, channels
        self.conv = Conv(ndim, 2 * channels, 2 * channels, 1, bias=False)
        self.norm = InstanceNorm(2 * channels)

    def forward(self, x: Tensor) -> Tensor:
        axes = tuple(range(2, 2 + self.ndim))
        z = rfft_nd(x, axes)
        y = torch.relu(self.norm(self.conv(complex_to_channels(z))))
        return irfft_nd(channels_to_complex(y), x.shape[2:], axes)

    def flops(self, spatial: Sequence[int]) -> float:
        half = list(spatial)
        half[-1] = half[-1] // 2 + 1
        n = math.prod(half) * 2 * self.channels
        return (
            self.conv.flops(half)
            + self.norm.flops(half)
            + n
            + 2 * self.channels * fft_flops(spatial, real_input=True)
        )


class SpectralTransform(nn.Module):
    def __init__(self, ndim: int, cin: int, cout: int):
        super().__init__()
        hidden = max(cout // 2, 1)
        self.hidden = hidden
        self.conv1 = Conv(ndim, cin, hidden, 1, bias=False)
        self.norm1 = InstanceNorm(hidden)
        self.fu = FourierUnit(ndim, hidden)
        self.conv2 = Conv(ndim, hidden, cout, 1, bias=False)

    def forward(self, x: Tensor) -> Tensor:
        h = torch.relu(self.norm1(self.conv1(x)))
        return self.conv2(h + self.fu(h))

    def flops(self, spatial: Sequence[int]) -> float:
        n = math.prod(spatial) * self.hidden
        return (
            self.conv1.flops(spatial)
            + self.norm1.flops(spatial)
            + 2 * n
            + self.fu.flops(spatial)
            + self.conv2.flops(spatial)
        )


class FFCLayer(nn.Module):
    """One fast Fourier convolution: local/global channel groups with cross paths."""

    def __init__(self, ndim: int, cin: int, cout: int, ratio: float, slope: float):
        super().__init__()
        self.in_g = int(cin * ratio)
        self.in_l = cin - self.in_g
        self.out_g = int(cout * ratio)
        self.out_l = cout - self.out_g
        self.slope = slope
        self.l2l = Conv(ndim, self.in_l, self.out_l, 3, bias=False) if self.in_l and self.out_l else None
        self.l2g = Conv(ndim, self.in_l, self.out_g, 3, bias=False) if self.in_l and self.out_g else None
        self.g2l = Conv(ndim, self.in_g, self.out_l, 3, bias=False) if self.in_g and self.out_l else None
        self.g2g = SpectralTransform(ndim, self.in_g, self.out_g) if self.in_g and self.out_g else None
        self.norm_l = InstanceNorm(self.out_l)
        self.norm_g = InstanceNorm(self.out_g) if self.out_g else None

    def forward(self, x: Tensor) -> Tensor:
        xl, xg = x[:, : self.in_l], x[:, self.in_l :]
        outs = []
        local = [p(v) for p, v in ((self.l2l, xl), (self.g2l, xg)) if p is not None]
        outs.append(leaky_relu(self.norm_l(sum(local)), self.slope))
        if self.out_g:
            glob = [p(v) for p, v in ((self.l2g, xl), (self.g2g, xg)) if p is not None]
            outs.append(leaky_relu(self.norm_g(sum(glob)), self.slope))
        return torch.cat(outs, dim=1)

    def flops(self, spatial: Sequence[int]) -> float:
        n = math.prod(spatial)
        total = sum(p.flops(spatial) for p in (self.l2l, self.l2g, self.g2l, self.g2g) if p is not None)
        total += self.norm_l.flops(spatial) + 2 * n * self.out_l
        if self.out_g:
            total += self.norm_g.flops(spatial) + 2 * n * self.out_g
        return total


class FFCBlock(_Block):
    """Two stacked FFC layers standing in for two consecutive 3x3 convolutions."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        ndim: int = 2,
        slope: float = DEFAULT_SLOPE,
        ratio: float = 0.5,
    ):
        super().__init__()
        self.in_channels, self.out_channels, self.ndim = in_channels, out_channels, ndim
        self.first = FFCLayer(ndim, in_channels, out_channels, ratio, slope)
        self.second = FFCLayer(ndim, out_channels, out_channels, ratio, slope)

    def forward(self, x: Tensor) -> Tensor:
        self._check(x)
        return self.second(self.first(x))

    def flops(self, spatial: Sequence[int]) -> float:
        return self.first.flops(spatial) + self.second.flops(spatial)


BLOCKS = {"two-conv": TwoConvBlock, "ffc": FFCBlock, "fasterfc": FasterFCBlock}


def make_block(kind: str, in_channels: int, out_channels: int, ndim: int = 2, **kw) -> _Block:
    try:
        cls = BLOCKS[kind]
    except KeyError:
        raise ValueError(f"unknown block kind {kind!r}; expected one of {sorted(BLOCKS)}") from None
    return cls(in_channels, out_channels, ndim, **kw)


def receptive_field_probe(
    forward: Callable[[Tensor], Tensor],
    input_shape: Sequence[int],
    position: Sequence[int] | None = None,
    seed: int = 0,
    dtype: torch.dtype = torch.float64,
) -> Tensor:
    """Boolean map of output positions that change when one input voxel is perturbed.

    ``input_shape`` is ``(B, C, *spatial)``; the perturbation hits every
    channel of sample 0 at ``position`` (default: the centre voxel).
    """
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(tuple(input_shape), generator=gen, dtype=dtype)
    spatial = input_shape[2:]
    if position is None:
        position = [s // 2 for s in spatial]
    bumped = x.clone()
    bumped[(0, slice(None)) + tuple(position)] += 1.0
    with torch.no_grad():
        y0 = forward(x)
        y1 = forward(bumped)
    diff = (y1 - y0).abs()[0].amax(dim=0)
    scale = max(float(y0.abs().max()), 1.0)
    return diff > 1e-13 * scale
