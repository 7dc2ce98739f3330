"""Block micro-benchmark: median wall-clock over repeated runs plus analytic cost columns."""
from __future__ import annotations

import ctypes
import ctypes.util
import statistics
import time
from dataclasses import dataclass, field
from typing import Sequence

import torch

from .blocks import make_block
from .unet import UNet, UNetSpec, count_params_actual, flops_estimate

KINDS = ("two-conv", "ffc", "fasterfc")
_M_TRIM_THRESHOLD, _M_MMAP_THRESHOLD = -1, -3


def tune_allocator(threshold: int = 1 << 30) -> bool:
    """Keep freed buffers in the heap so repeated runs do not pay page faults again.

    glibc only; returns False where mallopt is unavailable.
    """
    name = ctypes.util.find_library("c")
    if not name:
        return False
    try:
        libc = ctypes.CDLL(name)
        return bool(libc.mallopt(_M_MMAP_THRESHOLD, threshold)) and bool(libc.mallopt(_M_TRIM_THRESHOLD, threshold))
    except (OSError, AttributeError):
        return False


@dataclass
class BenchRow:
    kind: str
    shape: tuple[int, ...]
    forward_ms: float
    forward_backward_ms: float
    block_gflops: float
    block_params: int
    unet_gflops: float
    unet_params: int
    runs: int
    forward_samples: list[float] = field(repr=False, default_factory=list)


@dataclass
class BenchReport:
    rows: list[BenchRow]

    def row(self, kind: str, shape: Sequence[int] | None = None) -> BenchRow:
        for r in self.rows:
            if r.kind == kind and (shape is None or r.shape == tuple(shape)):
                return r
        raise KeyError(kind)

    def to_csv(self) -> str:
        lines = ["kind,shape,forward_ms,forward_backward_ms,block_gflops,block_params,unet_gflops,unet_params,runs"]
        for r in self.rows:
            shape = "x".join(map(str, r.shape))
            lines.append(
                f"{r.kind},{shape},{r.forward_ms:.3f},{r.forward_backward_ms:.3f},{r.block_gflops:.4f},"
                f"{r.block_params},{r.unet_gflops:.4f},{r.unet_params},{r.runs}"
            )
        return "\n".join(lines) + "\n"


def _median_ms(fn, repeats: int, warmups: int) -> tuple[float, list[float]]:
    for _ in range(warmups):
        fn()
    samples = []
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        samples.append(1e3 * (time.perf_counter() - t))
    return statistics.median(samples), samples


def bench_blocks(
    shapes: Sequence[Sequence[int]] = ((1, 32, 320, 320),),
    kinds: Sequence[str] = KINDS,
    repeats: int = 20,
    warmups: int = 3,
    backward: bool = True,
    seed: int = 0,
) -> BenchReport:
    """Time one block of each kind per (B, C, *spatial) shape, single-threaded, in f32."""
    if repeats < 20 or warmups < 3:
        raise ValueError(f"need at least 20 timed runs after 3 warmups, got {repeats} after {warmups}")
    unknown = set(kinds) - set(KINDS)
    if unknown:
        raise ValueError(f"unknown block kinds {sorted(unknown)}; expected a subset of {KINDS}")
    tune_allocator()
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    rows = []
    try:
        for shape in shapes:
            shape = tuple(int(s) for s in shape)
            c, spatial = shape[1], shape[2:]
            gen = torch.Generator().manual_seed(seed)
            x = torch.randn(shape, generator=gen)
            for kind in kinds:
                torch.manual_seed(seed)
                block = make_block(kind, c, c, len(spatial))
                with torch.no_grad():
                    fwd, samples = _median_ms(lambda: block(x), repeats, warmups)
                fb = float("nan")
                if backward:
                    xg = x.clone().requires_grad_(True)

                    def step():
                        block.zero_grad(set_to_none=True)
                        block(xg).sum().backward()

                    fb, _ = _median_ms(step, repeats, warmups)
                net = UNet(UNetSpec(32, 4, 1, 1, len(spatial), kind))
                rows.append(
                    BenchRow(
                        kind,
                        shape,
                        fwd,
                        fb,
                        shape[0] * block.flops(spatial) / 1e9,
                        count_params_actual(block),
                        flops_estimate(net, (1, 1) + spatial),
                        count_params_actual(net),
                        repeats,
                        samples,
                    )
                )
    finally:
        torch.set_num_threads(threads)
    return BenchReport(rows)
