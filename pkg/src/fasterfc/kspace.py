"""Scan-specific k-space interpolation (3D-RAKI) and the group k-space network.

k-space volumes are complex ``(N, F, P, S)`` with P and S phase encoded.
Networks see them as ``2N`` real channels: real parts first, then imaginary.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .autodiff import ParamStore, conv_nd
from .complex_ops import channels_to_complex, complex_to_channels, ifftc, rss
from .metrics import ssim_loss
from .simdata import AcsRegion, KSpaceVolume
from .unet import UNet, UNetSpec, cross_domain_pool, cross_domain_upsample  # noqa: F401 (re-export)

log = logging.getLogger(__name__)


def extract_acs(kvol: KSpaceVolume) -> tuple[AcsRegion, Tensor]:
    """ACS region and the (N, F, *acs) sub-array; F is always taken whole."""
    if kvol.acs is None:
        raise ValueError("k-space volume carries no ACS region")
    return kvol.acs, kvol.data[(slice(None), slice(None)) + kvol.acs.slices()]


def soft_dc(pred: Tensor, measured: Tensor, mask: Tensor, gamma: Tensor | float) -> Tensor:
    """Blend prediction and measurement on sampled positions; keep the prediction elsewhere."""
    # this form returns the measurement bit for bit when gamma == 1
    blended = (1 - gamma) * pred + gamma * measured
    return torch.where(mask.to(torch.bool).expand(pred.shape), blended, pred)


def hard_dc(pred: Tensor, kvol: KSpaceVolume) -> Tensor:
    return torch.where(kvol.mask.to(torch.bool).expand(pred.shape), kvol.data, pred)


# --- 3D-RAKI --------------------------------------------------------------


@dataclass(frozen=True)
class RakiSpec:
    kernels: tuple[tuple[int, int, int], ...] = ((5, 2, 2), (1, 1, 1), (3, 2, 2))
    widths: tuple[int, int] = (32, 8)
    lr: float = 0.1  # for mean-squared loss on RMS-normalized ACS data
    epochs: int = 1000
    momentum: float = 0.9
    rule: str = "sgd-momentum"
    paired_init: bool = True
    seed: int = 0


def offset_classes(R: tuple[int, int]) -> list[tuple[int, int]]:
    return [(a, b) for a in range(R[0]) for b in range(R[1]) if (a, b) != (0, 0)]


class RakiNet(nn.Module):
    """Three bias-free 3D convolutions, dilated by the lattice spacing along P and S.

    Output channel pairs hold (real, imaginary) predictions for each lattice
    offset class ``(dp, ds) != (0, 0)`` anchored at the lattice point ``q``;
    the first layer looks at ``q + {-R, 0}`` and the last at ``q + {0, R}``.
    """

    def __init__(self, n_coils: int, R: tuple[int, int], spec: RakiSpec = RakiSpec(), classes=None):
        super().__init__()
        self.R = tuple(R)
        self.classes = list(classes) if classes is not None else offset_classes(R)
        if not self.classes:
            raise ValueError("lattice spacing 1 leaves nothing to interpolate")
        k1, k2, k3 = spec.kernels
        n1, n2 = spec.widths
        gen = torch.Generator().manual_seed(spec.seed)

        def init(*shape):
            fan_in = math.prod(shape[1:])
            return nn.Parameter(torch.randn(shape, generator=gen, dtype=torch.float64) / math.sqrt(fan_in))

        self.w1 = init(n1, 2 * n_coils, *k1)
        self.w2 = init(n2, n1, *k2)
        self.w3 = init(2 * len(self.classes), n2, *k3)
        if spec.paired_init:
            self._pair()

    @torch.no_grad()
    def _pair(self) -> None:
        # mirrored units: relu(h) - relu(-h) = h, so the network starts out linear
        h1, h2 = self.w1.shape[0] // 2, self.w2.shape[0] // 2
        a = self.w1[:h1].clone()
        self.w1.copy_(torch.cat([a, -a]))
        b = self.w2[:h2, :h1].clone()
        self.w2.zero_()
        self.w2[:h2, :h1], self.w2[:h2, h1 : 2 * h1] = b, -b
        self.w2[h2 : 2 * h2, :h1], self.w2[h2 : 2 * h2, h1 : 2 * h1] = -b, b
        c = self.w3[:, :h2].clone()
        self.w3.zero_()
        self.w3[:, :h2], self.w3[:, h2 : 2 * h2] = c, -c

    @property
    def n_out(self) -> int:
        return self.w3.shape[0]

    def _conv(self, x: Tensor, w: Tensor, lead: bool) -> Tensor:
        kf, kp, ks = w.shape[2:]
        rp, rs = self.R
        side = lambda k, r: ((k - 1) * r, 0) if lead else (0, (k - 1) * r)  # noqa: E731
        pad = side(ks, rs) + side(kp, rp) + ((kf - 1) // 2, kf // 2)
        return conv_nd(F.pad(x, pad), w, dilation=(1, rp, rs))

    def forward(self, x: Tensor) -> Tensor:
        h = torch.relu(self._conv(x, self.w1, lead=True))
        h = torch.relu(self._conv(h, self.w2, lead=True))
        return self._conv(h, self.w3, lead=False)


def _class_masks(shape: tuple[int, int], R: tuple[int, int], origin: tuple[int, int], classes) -> Tensor:
    p = (torch.arange(shape[0]) - origin[0]) % R[0]
    s = (torch.arange(shape[1]) - origin[1]) % R[1]
    return torch.stack([(p[:, None] == a) & (s[None, :] == b) for a, b in classes])


def assemble(raw: Tensor, net: RakiNet, origin: tuple[int, int]) -> Tensor:
    """Scatter per-class predictions from their anchors onto the full grid -> (F, P, S) complex."""
    raw = raw[0]
    k = len(net.classes)
    z = torch.complex(raw[:k], raw[k:])
    masks = _class_masks(tuple(z.shape[-2:]), net.R, origin, net.classes)
    out = torch.zeros(z.shape[1:], dtype=z.dtype)
    for c, (a, b) in enumerate(net.classes):
        out = out + torch.roll(z[c], shifts=(a, b), dims=(-2, -1)) * masks[c]
    return out


def _lattice(kvol: KSpaceVolume) -> tuple[tuple[int, int], tuple[int, int]]:
    if kvol.lattice is None or len(kvol.lattice) != 2:
        raise ValueError("RAKI needs an equispaced lattice over both phase axes")
    (rp, op), (rs, os_) = kvol.lattice
    return (rp, rs), (op, os_)


def _lattice_input(k: Tensor, R, origin) -> Tensor:
    keep = _class_masks(tuple(k.shape[-2:]), R, origin, [(0, 0)])[0]
    return complex_to_channels((k * keep).unsqueeze(0)).reshape(1, -1, *k.shape[1:])


def _supervision(shape, R, origin, classes, inner) -> Tensor:
    """Off-lattice positions inside ``inner`` whose anchor neighbourhood lies inside ``shape``."""
    masks = _class_masks(shape, R, origin, classes)
    ok = torch.zeros(shape, dtype=torch.bool)
    for c, (a, b) in enumerate(classes):
        p = torch.arange(shape[0]) - a
        s = torch.arange(shape[1]) - b
        inside = ((p - R[0] >= 0) & (p + R[0] < shape[0]))[:, None] & ((s - R[1] >= 0) & (s + R[1] < shape[1]))[None, :]
        ok |= masks[c] & inside
    keep = torch.zeros(shape, dtype=torch.bool)
    keep[inner[0][0] : inner[0][1], inner[1][0] : inner[1][1]] = True
    return ok & keep


def _training_window(kvol: KSpaceVolume, R) -> tuple[tuple[slice, slice], tuple, tuple]:
    """ACS plus a margin of measured samples wide enough for every ACS target's neighbourhood.

    Returns window slices, the lattice origin and the ACS ranges in window coordinates.
    """
    (rp, op), (rs, os_) = kvol.lattice
    lo = [max(a - 2 * r, 0) for (a, _), r in zip(kvol.acs.ranges, R)]
    hi = [min(b + r, n) for (_, b), r, n in zip(kvol.acs.ranges, R, kvol.data.shape[2:])]
    window = tuple(slice(l, h) for l, h in zip(lo, hi))
    local = ((op - lo[0]) % rp, (os_ - lo[1]) % rs)
    inner = tuple((a - l, b - l) for (a, b), l in zip(kvol.acs.ranges, lo))
    return window, local, inner


def _training_data(kvol: KSpaceVolume, R, scale: float | None = None):
    window, local, inner = _training_window(kvol, R)
    k = kvol.data[(slice(None), slice(None)) + window]
    if scale is None:
        _, acs = extract_acs(kvol)
        scale = float(acs.abs().pow(2).mean().sqrt()) or 1.0
    k = (k / scale).to(torch.complex128)
    sup = _supervision(tuple(k.shape[-2:]), R, local, offset_classes(R), inner).expand(k.shape[1:])
    return _lattice_input(k, R, local), k, sup, local, scale


@dataclass
class RakiModel:
    net: RakiNet
    coil: int
    scale: float
    history: list[float] = field(default_factory=list)


def raki_train(kvol: KSpaceVolume, coil: int, spec: RakiSpec = RakiSpec()) -> RakiModel:
    """Fit the interpolation network for one coil on the volume's own ACS region."""
    if kvol.data.dim() != 4:
        raise ValueError(f"RAKI expects (N, F, P, S) k-space, got {tuple(kvol.data.shape)}")
    if not 0 <= coil < kvol.data.shape[0]:
        raise ValueError(f"coil {coil} out of range for {kvol.data.shape[0]} coils")
    R, _ = _lattice(kvol)
    region, _ = extract_acs(kvol)
    need = tuple(2 * r + 1 for r in R)
    if any(n < m for n, m in zip(region.shape, need)):
        raise ValueError(f"ACS region {region.shape} too small for the receptive field; minimum is {need}")
    x, k, sup, local, scale = _training_data(kvol, R)
    net = RakiNet(k.shape[0], R, spec)
    target = k[coil]
    count = int(sup.sum())
    store = ParamStore(net)
    model = RakiModel(net, coil, scale)

    def objective():
        err = (assemble(net(x), net, local) - target)[sup]
        loss = (err.real**2 + err.imag**2).sum() / count
        if not torch.isfinite(loss):
            raise FloatingPointError(f"RAKI loss became non-finite for coil {coil}")
        return loss

    if spec.rule == "lbfgs":
        opt = torch.optim.LBFGS(net.parameters(), lr=1.0, max_iter=spec.epochs, history_size=50,
                                tolerance_grad=1e-12, tolerance_change=1e-16, line_search_fn="strong_wolfe")

        def closure():
            opt.zero_grad()
            loss = objective()
            loss.backward()
            model.history.append(float(loss.detach()))
            return loss

        opt.step(closure)
        return model
    for _ in range(spec.epochs):
        loss = objective()
        store.backward(loss)
        store.step(spec.rule, spec.lr, momentum=spec.momentum)
        model.history.append(float(loss.detach()))
    return model


def raki_acs_mse(kvol: KSpaceVolume, model: RakiModel) -> float:
    """Mean squared error on the supervised ACS positions, in units of the ACS RMS."""
    R, _ = _lattice(kvol)
    x, k, sup, local, _ = _training_data(kvol, R, model.scale)
    with torch.no_grad():
        err = (assemble(model.net(x), model.net, local) - k[model.coil])[sup]
    return float((err.real**2 + err.imag**2).mean())


def raki_infer(kvol: KSpaceVolume, models: list[RakiModel]) -> Tensor:
    """Fill every coil's grid, then restore measured samples exactly."""
    n = kvol.data.shape[0]
    if len(models) != n or sorted(m.coil for m in models) != list(range(n)):
        raise ValueError(f"need one model per coil: {n} coils, models for {[m.coil for m in models]}")
    R, origin = _lattice(kvol)
    out = torch.empty_like(kvol.data)
    with torch.no_grad():
        for m in models:
            x = _lattice_input((kvol.data / m.scale).to(torch.complex128), R, origin)
            out[m.coil] = (assemble(m.net(x), m.net, origin) * m.scale).to(out.dtype)
    return hard_dc(out, kvol)


def raki_train_all(kvol: KSpaceVolume, spec: RakiSpec = RakiSpec()) -> list[RakiModel]:
    return [raki_train(kvol, i, spec) for i in range(kvol.data.shape[0])]


# --- group K-Net ----------------------------------------------------------


@dataclass(frozen=True)
class KNetSpec:
    c: int = 16
    levels: int = 3
    residual: bool = True
    gamma: float = 1.0
    block: str = "two-conv"
    lr: float = 1e-3
    lr_late: float = 1e-4
    drop_epoch: int = 240
    epochs: int = 250


class KNet(nn.Module):
    """Residual 3D k-space U-Net with cross-domain resampling and a trainable soft-DC weight.

    The network runs on k-space scaled to unit RMS and the output is scaled
    back, so the map is equivariant to the volume's intensity scale.  With the
    residual path on, the output convolution starts at zero.
    """

    def __init__(self, n_coils: int, spec: KNetSpec = KNetSpec()):
        super().__init__()
        self.spec = spec
        self.n_coils = n_coils
        self.net = UNet(UNetSpec(spec.c, spec.levels, 2 * n_coils, 2 * n_coils, 3, spec.block, "cross-domain"))
        if spec.residual:
            # start from the identity map so early steps cannot swamp the filled k-space
            nn.init.zeros_(self.net.head.weight)
            nn.init.zeros_(self.net.head.bias)
        self.gamma = nn.Parameter(torch.tensor(float(spec.gamma)))

    def forward(self, k: Tensor) -> Tensor:
        if k.dim() != 4 or k.shape[0] != self.n_coils:
            raise ValueError(f"expected ({self.n_coils}, F, P, S) k-space, got {tuple(k.shape)}")
        scale = k.abs().pow(2).mean().sqrt().clamp_min(torch.finfo(k.real.dtype).tiny)
        z = channels_to_complex(self.net(complex_to_channels(k.unsqueeze(0) / scale)))[0] * scale
        return z + k if self.spec.residual else z


def group_reconstruct(k_filled: Tensor, kvol: KSpaceVolume, knet: KNet) -> Tensor:
    """Multi-coil complex images: IFFT of soft-DC(K-Net(K) + K)."""
    k = soft_dc(knet(k_filled), kvol.data, kvol.mask, knet.gamma)
    return ifftc(k, tuple(range(1, k.dim())))


@dataclass
class KNetItem:
    k_filled: Tensor
    kvol: KSpaceVolume
    target: Tensor  # RSS magnitude (F, P, S)


def knet_train(knet: KNet, items: list[KNetItem], epochs: int | None = None, steps: int | None = None) -> list[float]:
    """SSIM-loss training with the step-down learning-rate schedule; one item per step."""
    spec = knet.spec
    epochs = spec.epochs if epochs is None else epochs
    total = steps if steps is not None else epochs * len(items)
    drop = spec.drop_epoch * len(items) if steps is None else int(total * spec.drop_epoch / spec.epochs)
    store = ParamStore(knet)
    history = []
    for step in range(total):
        item = items[step % len(items)]
        pred = rss(group_reconstruct(item.k_filled, item.kvol, knet), dim=0)
        loss = ssim_loss(pred, item.target)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"K-Net loss became non-finite at step {step}")
        store.backward(loss)
        store.step("adaptive-moments", spec.lr if step < drop else spec.lr_late)
        history.append(float(loss.detach()))
    return history
