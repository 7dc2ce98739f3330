"""Split-slice 3D image refinement.

A multi-coil complex volume ``(N, F, P, S)`` is cut along F into overlapping
blocks of L slices.  Each block gets its own sensitivity maps, is fused into a
single complex image and refined by residual 3D U-Nets.  Blocks are merged
back by keeping each slice from exactly one block.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .autodiff import ParamStore
from .metrics import ssim_loss
from .unet import UNet, UNetSpec
from .varnet import SensitivityNet, _apply_complex, dss, reduce


@dataclass
class SliceBlock:
    data: Tensor  # (..., L, P, S)
    start: int
    role: str  # first | interior | last


def _check_split(F: int, L: int) -> None:
    if L < 4 or L % 4:
        raise ValueError(f"block length L must be a positive multiple of 4, got {L}")
    if F < L or F % (L // 2):
        padded = max(L, -(-F // (L // 2)) * (L // 2))
        raise ValueError(f"F={F} must be >= L={L} and divisible by L/2={L // 2}; pad F to {padded}")


def split_slices(volume: Tensor, L: int) -> list[SliceBlock]:
    """Blocks start every L/2 slices along the third-from-last axis."""
    F = volume.shape[-3]
    _check_split(F, L)
    n = 2 * F // L - 1
    blocks = []
    for b in range(n):
        s = b * L // 2
        role = "first" if b == 0 else "last" if b == n - 1 else "interior"
        blocks.append(SliceBlock(volume[..., s : s + L, :, :], s, role))
    return blocks


def merge_ranges(starts: list[int], L: int, F: int) -> list[tuple[int, int]]:
    """Slice range (global indices) each block contributes."""
    if len(starts) == 1:
        return [(0, F)]
    out = []
    for i, s in enumerate(starts):
        if i == 0:
            out.append((0, 3 * L // 4))
        elif i == len(starts) - 1:
            out.append((F - 3 * L // 4, F))
        else:
            out.append((s + L // 4, s + 3 * L // 4))
    return out


def merge_slices(blocks: list[SliceBlock], F: int) -> Tensor:
    if not blocks:
        raise ValueError("no blocks to merge")
    L = blocks[0].data.shape[-3]
    _check_split(F, L)
    starts = [b.start for b in blocks]
    if starts != [b * L // 2 for b in range(2 * F // L - 1)]:
        raise ValueError(f"blocks do not form the complete split of F={F} with L={L}: starts {starts}")
    ranges = merge_ranges(starts, L, F)
    covered = torch.zeros(F, dtype=torch.int64)
    parts = []
    for blk, (a, b) in zip(blocks, ranges):
        covered[a:b] += 1
        parts.append(blk.data[..., a - blk.start : b - blk.start, :, :])
    assert bool((covered == 1).all()), "merge rules must cover each slice exactly once"
    return torch.cat(parts, dim=-3)


def estimate_sensitivities_3d(block: Tensor, net) -> Tensor:
    """dSS-normalized maps from one block's coil images, coils batched through one net."""
    return dss(_apply_complex(net, block))


def fuse_coils(block: Tensor, maps: Tensor) -> Tensor:
    if tuple(block.shape) != tuple(maps.shape):
        raise ValueError(f"coil block {tuple(block.shape)} and maps {tuple(maps.shape)} differ")
    return reduce(block, maps)


def cascade_refine(x: Tensor, nets) -> Tensor:
    for net in nets:
        x = _apply_complex(net, x.unsqueeze(0)).squeeze(0) + x
    return x


@dataclass(frozen=True)
class FasNetSpec:
    L: int = 16
    cascades: int = 2
    sens_c: int = 8
    sens_levels: int = 2
    refine_c: int = 18
    refine_levels: int = 4
    block: str = "fasterfc"
    lr: float = 1e-3
    lr_late: float = 1e-4
    epochs: int = 160
    epochs_late: int = 100


class FasNet(nn.Module):
    def __init__(self, spec: FasNetSpec = FasNetSpec()):
        super().__init__()
        self.spec = spec
        self.sens_net = SensitivityNet(UNetSpec(spec.sens_c, spec.sens_levels, 2, 2, 3, spec.block))
        self.refiners = nn.ModuleList(
            UNet(UNetSpec(spec.refine_c, spec.refine_levels, 2, 2, 3, spec.block)) for _ in range(spec.cascades)
        )
        for net in self.refiners:
            # residual stages start as the identity
            nn.init.zeros_(net.head.weight)
            nn.init.zeros_(net.head.bias)

    def forward_block(self, block: Tensor) -> Tensor:
        """(N, L, P, S) coil images -> refined complex (L, P, S)."""
        maps = estimate_sensitivities_3d(block, self.sens_net)
        return cascade_refine(fuse_coils(block, maps), self.refiners)

    def reconstruct(self, volume: Tensor) -> Tensor:
        """Multi-coil complex volume (N, F, P, S) -> magnitude (F, P, S)."""
        F = volume.shape[-3]
        blocks = split_slices(volume, self.spec.L)
        out = [SliceBlock(self.forward_block(b.data), b.start, b.role) for b in blocks]
        return merge_slices(out, F).abs()


@dataclass
class FasNetItem:
    block: Tensor  # (N, L, P, S) complex
    target: Tensor  # (L, P, S) magnitude
    data_range: float


def make_items(volumes: list[tuple[Tensor, Tensor]], L: int) -> list[FasNetItem]:
    """Every block of every (coil images, magnitude target) pair is one training item."""
    items = []
    for coils, target in volumes:
        peak = float(target.max())
        for b, t in zip(split_slices(coils, L), split_slices(target, L)):
            items.append(FasNetItem(b.data, t.data, peak))
    return items


def fasnet_train(model: FasNet, items: list[FasNetItem], epochs: int | None = None, epochs_late: int | None = None,
                 seed: int = 0) -> list[float]:
    """Adam on block SSIM loss; items are visited in a seeded shuffled order each epoch."""
    spec = model.spec
    e1 = spec.epochs if epochs is None else epochs
    e2 = spec.epochs_late if epochs_late is None else epochs_late
    gen = torch.Generator().manual_seed(seed)
    store = ParamStore(model)
    history = []
    for epoch in range(e1 + e2):
        lr = spec.lr if epoch < e1 else spec.lr_late
        for i in torch.randperm(len(items), generator=gen).tolist():
            item = items[i]
            loss = ssim_loss(model.forward_block(item.block).abs(), item.target, item.data_range)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"FAS-Net loss became non-finite in epoch {epoch}")
            store.backward(loss)
            store.step("adaptive-moments", lr)
            history.append(float(loss.detach()))
    return history
