"""Array primitives with reverse-mode gradients.

Arrays are plain ``torch.Tensor`` values and the tape is torch's autograd
graph.  Complex arrays use torch's native complex dtypes, which store real
and imaginary parts interleaved (``complex128`` for f64 work, ``complex64``
for f32 training runs).

Every primitive the networks rely on is routed through this module so that
shape contracts are checked in one place and FFT calls can be counted.
"""
from __future__ import annotations

import contextlib
import logging
import math
from typing import Callable, Iterable, Iterator, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor

log = logging.getLogger(__name__)

_CONV = {1: F.conv1d, 2: F.conv2d, 3: F.conv3d}
_CONV_T = {1: F.conv_transpose1d, 2: F.conv_transpose2d, 3: F.conv_transpose3d}


def _tuple(v: int | Sequence[int], n: int) -> tuple[int, ...]:
    if isinstance(v, int):
        return (v,) * n
    v = tuple(int(x) for x in v)
    if len(v) != n:
        raise ValueError(f"expected {n} values, got {v}")
    return v


def conv_nd(
    input: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int | Sequence[int] = 1,
    dilation: int | Sequence[int] = 1,
    padding: int | Sequence[int] = 0,
) -> Tensor:
    """N-d cross-correlation with zero padding (1, 2 or 3 spatial axes)."""
    rank = weight.dim() - 2
    if rank not in _CONV or input.dim() != rank + 2:
        raise ValueError(
            f"input shape {tuple(input.shape)} incompatible with weight shape {tuple(weight.shape)}"
        )
    if input.shape[1] != weight.shape[1]:
        raise ValueError(
            f"input channels of {tuple(input.shape)} do not match weight in-channels of {tuple(weight.shape)}"
        )
    stride, padding, dilation = _tuple(stride, rank), _tuple(padding, rank), _tuple(dilation, rank)
    if weight.shape[2:] == (1,) * rank and stride == (1,) * rank and padding == (0,) * rank:
        # pointwise: a channel matmul is markedly faster than the generic kernel on CPU
        b, c = input.shape[:2]
        w = weight.reshape(1, weight.shape[0], c).expand(b, -1, -1)
        x = input.reshape(b, c, -1)
        if bias is None:
            out = torch.bmm(w, x)
        else:
            out = torch.baddbmm(bias.reshape(1, -1, 1).expand(b, -1, x.shape[-1]), w, x)
        return out.reshape((b, weight.shape[0]) + tuple(input.shape[2:]))
    return _CONV[rank](input, weight, bias, stride, padding, dilation)


def conv_transpose_nd(
    input: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int | Sequence[int] = 2
) -> Tensor:
    """Transposed convolution; only kernel == stride == 2 is supported."""
    rank = weight.dim() - 2
    stride = _tuple(stride, rank)
    if tuple(weight.shape[2:]) != (2,) * rank or stride != (2,) * rank:
        raise ValueError(
            f"only 2-tap stride-2 transposed convolution is supported, got kernel "
            f"{tuple(weight.shape[2:])} stride {stride}"
        )
    if input.dim() != rank + 2 or input.shape[1] != weight.shape[0]:
        raise ValueError(
            f"input shape {tuple(input.shape)} incompatible with weight shape {tuple(weight.shape)}"
        )
    return _CONV_T[rank](input, weight, bias, stride)


# --- FFT ------------------------------------------------------------------

class TransformCounter:
    """Counts forward and inverse spectral transforms while active."""

    def __init__(self) -> None:
        self.forward = 0
        self.inverse = 0

    @property
    def round_trips(self) -> int:
        return min(self.forward, self.inverse)


_counters: list[TransformCounter] = []


@contextlib.contextmanager
def count_transforms() -> Iterator[TransformCounter]:
    counter = TransformCounter()
    _counters.append(counter)
    try:
        yield counter
    finally:
        _counters.remove(counter)


def _tick(kind: str) -> None:
    for c in _counters:
        setattr(c, kind, getattr(c, kind) + 1)


def fft_nd(input: Tensor, axes: Sequence[int]) -> Tensor:
    """Unitary DFT over ``axes``; any positive lengths."""
    _tick("forward")
    return torch.fft.fftn(input, dim=tuple(axes), norm="ortho")


def ifft_nd(input: Tensor, axes: Sequence[int]) -> Tensor:
    _tick("inverse")
    return torch.fft.ifftn(input, dim=tuple(axes), norm="ortho")


def rfft_nd(input: Tensor, axes: Sequence[int]) -> Tensor:
    _tick("forward")
    return torch.fft.rfftn(input, dim=tuple(axes), norm="ortho")


def irfft_nd(input: Tensor, sizes: Sequence[int], axes: Sequence[int]) -> Tensor:
    _tick("inverse")
    return torch.fft.irfftn(input, s=tuple(sizes), dim=tuple(axes), norm="ortho")


# --- pointwise and normalization -----------------------------------------

INSTANCE_NORM_EPS = 1e-5


def instance_norm(
    input: Tensor, scale: Tensor | None = None, shift: Tensor | None = None, eps: float = INSTANCE_NORM_EPS
) -> Tensor:
    """Per-sample, per-channel standardization over spatial axes, then affine."""
    if scale is not None and scale.numel() != input.shape[1]:
        raise ValueError(f"scale has {scale.numel()} entries for {input.shape[1]} channels")
    # group norm with one group per channel is the same statistic and runs faster on CPU
    return F.group_norm(input, input.shape[1], scale, shift, eps)


def leaky_relu(input: Tensor, n: float) -> Tensor:
    if not 0.0 <= n <= 1.0:
        raise ValueError(f"negative slope must lie in [0, 1], got {n}")
    if n == 1.0:
        return input
    return F.leaky_relu(input, n)


# --- resampling -----------------------------------------------------------

def avg_pool_nd(input: Tensor, window: int | Sequence[int]) -> Tensor:
    """Non-overlapping mean pooling; works for real and complex arrays."""
    rank = input.dim() - 2
    window = _tuple(window, rank)
    spatial = input.shape[2:]
    if any(s % w for s, w in zip(spatial, window)):
        raise ValueError(f"spatial extents {tuple(spatial)} not divisible by window {window}")
    shape = list(input.shape[:2])
    for s, w in zip(spatial, window):
        shape += [s // w, w]
    return input.reshape(shape).mean(dim=tuple(range(3, 3 + 2 * rank, 2)))


def nn_upsample_nd(input: Tensor, factor: int | Sequence[int]) -> Tensor:
    """Nearest-neighbour replication by an integer factor per spatial axis."""
    rank = input.dim() - 2
    factor = _tuple(factor, rank)
    out = input
    for axis, f in enumerate(factor, start=2):
        if f < 1:
            raise ValueError(f"upsampling factor must be positive, got {factor}")
        out = out.repeat_interleave(f, dim=axis)
    return out


# --- parameters and optimization -----------------------------------------

class NonFiniteGradient(FloatingPointError):
    pass


class ParamStore:
    """Named trainable arrays, their gradients and optimizer state.

    Gradients live in each parameter's ``.grad`` slot.  ``backward`` refuses
    to run again until the previous gradients were consumed by ``step`` or
    cleared by ``zero_grad``.
    """

    def __init__(self, params: Iterable[tuple[str, Tensor]] | torch.nn.Module):
        if isinstance(params, torch.nn.Module):
            params = params.named_parameters()
        self.params: dict[str, Tensor] = {}
        for name, p in params:
            if name in self.params:
                raise ValueError(f"duplicate parameter name {name!r}")
            if not p.requires_grad:
                p.requires_grad_(True)
            self.params[name] = p
        self._optimizers: dict[str, torch.optim.Optimizer] = {}
        self._pending = False

    def __len__(self) -> int:
        return len(self.params)

    def numel(self) -> int:
        return sum(p.numel() for p in self.params.values())

    def grads(self) -> dict[str, Tensor]:
        return {
            k: p.grad if p.grad is not None else torch.zeros_like(p) for k, p in self.params.items()
        }

    def backward(self, loss: Tensor) -> None:
        if loss.numel() != 1:
            raise ValueError(f"loss must be scalar, got shape {tuple(loss.shape)}")
        if self._pending:
            raise RuntimeError("gradients from a previous backward pass were not reset")
        loss.backward()
        for p in self.params.values():
            if p.grad is None:
                p.grad = torch.zeros_like(p)
        self._pending = True

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
        self._pending = False

    def _optimizer(self, rule: str, momentum: float, betas: tuple[float, float]) -> torch.optim.Optimizer:
        if rule not in self._optimizers:
            params = list(self.params.values())
            if rule == "sgd-momentum":
                opt = torch.optim.SGD(params, lr=0.0, momentum=momentum)
            elif rule == "adaptive-moments":
                opt = torch.optim.Adam(params, lr=0.0, betas=betas)
            else:
                raise ValueError(f"unknown optimizer rule {rule!r}")
            self._optimizers[rule] = opt
        return self._optimizers[rule]

    def step(
        self,
        rule: str = "adaptive-moments",
        lr: float = 1e-3,
        momentum: float = 0.9,
        betas: tuple[float, float] = (0.9, 0.999),
    ) -> None:
        for name, g in self.grads().items():
            if not torch.isfinite(g).all():
                log.error("non-finite gradient in %s; step refused", name)
                raise NonFiniteGradient(f"non-finite gradient in parameter {name!r}")
        opt = self._optimizer(rule, momentum, betas)
        for group in opt.param_groups:
            group["lr"] = lr
        opt.step()
        self.zero_grad()


def optimizer_step(store: ParamStore, rule: str, lr: float, **kwargs) -> None:
    store.step(rule, lr, **kwargs)


# --- finite-difference oracle --------------------------------------------

def fd_check(
    fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    eps: float | Sequence[float] = (1e-5, 1e-6, 1e-7),
    n_dirs: int = 3,
    seed: int = 0,
    floor: float = 1e-6,
) -> float:
    """Largest relative mismatch between autograd and central differences.

    ``fn`` is evaluated with the current values of ``tensors`` (leaf tensors
    that require grad).  Each probe compares the directional derivative along
    a random direction (one per tensor, plus a joint one) with
    ``(f(x + eps v) - f(x - eps v)) / (2 eps)``.  With several step sizes a
    probe keeps its best agreement: a step that straddles an activation kink
    spoils one difference quotient but not all of them, while a wrong gradient
    disagrees at every step.  Mismatches are relative to
    the larger of the two derivatives, floored at ``floor`` times the full
    gradient norm times ``|v|`` so that exactly-zero directional derivatives
    (e.g. a bias ahead of a normalization) compare against round-off rather
    than against zero.
    """
    gen = torch.Generator().manual_seed(seed)
    tensors = list(tensors)
    for t in tensors:
        t.grad = None
    loss = fn()
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    grads = [torch.zeros_like(t) if g is None else g for t, g in zip(tensors, grads)]
    gnorm = math.sqrt(sum(float((g.abs() ** 2).sum()) for g in grads))

    steps = [eps] if isinstance(eps, (int, float)) else list(eps)

    def quotient(dirs: list[Tensor | None], h: float) -> float:
        with torch.no_grad():
            for t, d in zip(tensors, dirs):
                if d is not None:
                    t.add_(h * d)
            plus = float(fn())
            for t, d in zip(tensors, dirs):
                if d is not None:
                    t.sub_(2 * h * d)
            minus = float(fn())
            for t, d in zip(tensors, dirs):
                if d is not None:
                    t.add_(h * d)
        return (plus - minus) / (2 * h)

    def probe(dirs: list[Tensor | None]) -> float:
        analytic = sum(
            float((g.conj() * d).real.sum()) if d is not None else 0.0 for g, d in zip(grads, dirs)
        )
        dnorm = math.sqrt(sum(float((d.abs() ** 2).sum()) for d in dirs if d is not None))
        best = math.inf
        for h in steps:
            numeric = quotient(dirs, h)
            scale = max(abs(numeric), abs(analytic), floor * gnorm * dnorm)
            best = min(best, 0.0 if scale == 0.0 else abs(numeric - analytic) / scale)
        return best

    def direction(t: Tensor) -> Tensor:
        if t.is_complex():
            r = torch.randn(t.shape, generator=gen, dtype=torch.float64)
            i = torch.randn(t.shape, generator=gen, dtype=torch.float64)
            return torch.complex(r, i).to(t.dtype)
        return torch.randn(t.shape, generator=gen, dtype=torch.float64).to(t.dtype)

    worst = 0.0
    for _ in range(n_dirs):
        worst = max(worst, probe([direction(t) for t in tensors]))
        for k, t in enumerate(tensors):
            dirs: list[Tensor | None] = [None] * len(tensors)
            dirs[k] = direction(t)
            worst = max(worst, probe(dirs))
    return worst
