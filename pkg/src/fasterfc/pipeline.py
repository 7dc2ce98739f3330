"""Staged training and reconstruction shared by the command line and the tests.

Stages are trained one after another; each stage's output is fixed and
becomes the next stage's dataset.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import Tensor

from .complex_ops import ifftc, rss
from .fasnet import FasNet, FasNetSpec, fasnet_train, make_items
from .kspace import KNet, KNetItem, KNetSpec, RakiSpec, group_reconstruct, knet_train, raki_infer, raki_train_all
from .simdata import (
    KSpaceVolume,
    MaskSpec,
    apply_mask,
    make_coils,
    make_mask,
    make_phantom,
    simulate_kspace,
    target_image,
)


@dataclass
class Sample:
    kvol: KSpaceVolume
    target: Tensor
    seed: int


def volume_seeds(seed: int, n: int) -> list[int]:
    """Independent per-volume seeds derived from one dataset seed."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def make_sample(
    seed: int, coils: int, extents: Sequence[int], mask: MaskSpec, sigma: float = 0.0
) -> Sample:
    phantom = make_phantom(seed, extents)
    profiles = make_coils(coils, extents, seed=seed)
    k = simulate_kspace(phantom, profiles, sigma=sigma * float(phantom.volume.max()), seed=seed)
    kvol = apply_mask(k, make_mask(mask, extents[1:]))
    return Sample(kvol, target_image(phantom, profiles), seed)


def make_dataset(
    n: int, coils: int, extents: Sequence[int], mask: MaskSpec, seed: int, sigma: float = 0.0
) -> list[Sample]:
    return [make_sample(s, coils, extents, mask, sigma) for s in volume_seeds(seed, n)]


def to_f32(kvol: KSpaceVolume) -> KSpaceVolume:
    return KSpaceVolume(kvol.data.to(torch.complex64), kvol.mask.float(), kvol.acs, kvol.lattice)


def raki_stage(kvol: KSpaceVolume, spec: RakiSpec) -> Tensor:
    """Scan-specific fill of every coil, measured samples restored."""
    return raki_infer(kvol, raki_train_all(kvol, spec))


def knet_stage(
    samples: Sequence[Sample], filled: Sequence[Tensor], spec: KNetSpec, steps: int | None = None, seed: int = 0
) -> tuple[KNet, list[float]]:
    torch.manual_seed(seed)
    knet = KNet(samples[0].kvol.data.shape[0], spec).float()
    items = [KNetItem(f.to(torch.complex64), to_f32(s.kvol), s.target.float()) for s, f in zip(samples, filled)]
    history = knet_train(knet, items, steps=steps)
    return knet, history


@torch.no_grad()
def knet_images(knet: KNet, sample: Sample, filled: Tensor) -> Tensor:
    """Multi-coil complex images after the group k-space stage."""
    return group_reconstruct(filled.to(torch.complex64), to_f32(sample.kvol), knet)


def fasnet_stage(
    images: Sequence[Tensor], targets: Sequence[Tensor], spec: FasNetSpec,
    epochs: int | None = None, epochs_late: int | None = None, seed: int = 0,
) -> tuple[FasNet, list[float]]:
    torch.manual_seed(seed)
    model = FasNet(spec).float()
    items = make_items([(x.to(torch.complex64), t.float()) for x, t in zip(images, targets)], spec.L)
    history = fasnet_train(model, items, epochs, epochs_late, seed=seed)
    return model, history


@torch.no_grad()
def fasnet_reconstruct(model: FasNet, images: Tensor) -> Tensor:
    return model.reconstruct(images.to(torch.complex64))


def stage_rss(k: Tensor) -> Tensor:
    return rss(ifftc(k, tuple(range(1, k.dim()))), dim=0)
