"""Complex-array helpers shared by the image- and k-space-domain modules."""
from __future__ import annotations

from typing import Sequence

import torch
from torch import Tensor

from .autodiff import fft_nd, ifft_nd


def channels_to_complex(f: Tensor) -> Tensor:
    """(B, C, ...) real -> (B, C/2, ...) complex, first half real, second half imaginary."""
    c = f.shape[1]
    if c % 2:
        raise ValueError(f"channel count must be even to pair as complex, got {c}")
    return torch.complex(f[:, : c // 2], f[:, c // 2 :])


def complex_to_channels(z: Tensor) -> Tensor:
    return torch.cat([z.real, z.imag], dim=1)


def fftc(x: Tensor, axes: Sequence[int]) -> Tensor:
    """Centered unitary DFT: k-space index n//2 holds the DC term."""
    axes = tuple(axes)
    return torch.fft.fftshift(fft_nd(torch.fft.ifftshift(x, dim=axes), axes), dim=axes)


def ifftc(k: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    return torch.fft.fftshift(ifft_nd(torch.fft.ifftshift(k, dim=axes), axes), dim=axes)


def rss(x: Tensor, dim: int = 0) -> Tensor:
    """Root-sum-of-squares over the coil axis; accepts real or complex coils."""
    return torch.sqrt((x.real**2 + x.imag**2).sum(dim) if x.is_complex() else (x**2).sum(dim))
