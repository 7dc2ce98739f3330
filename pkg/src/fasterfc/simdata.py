"""Synthetic multi-coil MRI data, undersampling masks and the NAV1 container.

Spatial axes are ordered (F, P) for 2D data and (F, P, S) for 3D data; F is
the fully sampled frequency-encoding axis and the remaining axes are phase
encoded.  k-space is centered: index ``n // 2`` of every axis holds DC.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
from torch import Tensor

from .complex_ops import fftc, ifftc, rss

# --- data types -----------------------------------------------------------


@dataclass(frozen=True)
class AcsRegion:
    """Half-open index ranges of the fully sampled center, one per phase axis."""

    ranges: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if not self.ranges or any(b <= a for a, b in self.ranges):
            raise ValueError(f"ACS region must be non-empty, got {self.ranges}")

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(b - a for a, b in self.ranges)

    def slices(self) -> tuple[slice, ...]:
        return tuple(slice(a, b) for a, b in self.ranges)


@dataclass
class KSpaceVolume:
    """Undersampled multi-coil k-space.

    ``data`` is complex ``(N, F, *phase)``; ``mask`` is a 0/1 array over the
    phase axes and broadcasts over coils and F.  ``lattice`` holds
    ``(R, origin)`` per phase axis for equispaced masks.
    """

    data: Tensor
    mask: Tensor
    acs: AcsRegion | None = None
    lattice: tuple[tuple[int, int], ...] | None = None

    def __post_init__(self):
        if tuple(self.mask.shape) != tuple(self.data.shape[2:]):
            raise ValueError(
                f"mask shape {tuple(self.mask.shape)} does not match phase axes of {tuple(self.data.shape)}"
            )

    @property
    def ndim(self) -> int:
        return self.data.dim() - 1

    @property
    def spatial_axes(self) -> tuple[int, ...]:
        return tuple(range(1, self.data.dim()))

    @property
    def phase_axes(self) -> tuple[int, ...]:
        return tuple(range(2, self.data.dim()))

    def full_mask(self) -> Tensor:
        return self.mask.to(self.data.real.dtype).expand(self.data.shape[1:])

    def omega(self) -> Tensor:
        """Indices of sampled positions over (F, *phase)."""
        return torch.nonzero(self.full_mask() > 0)

    def with_data(self, data: Tensor) -> "KSpaceVolume":
        return KSpaceVolume(data, self.mask, self.acs, self.lattice)


@dataclass(frozen=True)
class MaskSpec:
    kind: str = "random-1d"  # or "equispaced-2d"
    acceleration: int = 4
    center_fraction: float = 0.08
    seed: int = 0


@dataclass
class Mask:
    mask: Tensor
    acs: AcsRegion
    lattice: tuple[tuple[int, int], ...] | None = None

    @property
    def omega(self) -> Tensor:
        return torch.nonzero(self.mask > 0)


@dataclass
class Phantom:
    volume: Tensor
    seed: int
    ellipsoids: list[dict] = field(default_factory=list)


@dataclass
class CoilProfileSet:
    maps: Tensor  # complex (N, *extents)


# --- generators -----------------------------------------------------------


def make_phantom(seed: int, extents: Sequence[int], n_ellipsoids: int = 10) -> Phantom:
    """Sum of randomized ellipsoids with piecewise-constant intensities, clipped to [0, 1]."""
    extents = tuple(int(e) for e in extents)
    if any(e < 8 for e in extents):
        raise ValueError(f"phantom extents must be >= 8 per axis, got {extents}")
    rng = np.random.default_rng(seed)
    nd = len(extents)
    grids = np.meshgrid(*[np.linspace(-1, 1, e) for e in extents], indexing="ij")
    vol = np.zeros(extents)
    params = []
    # outer body, then inner structures with mixed-sign intensity
    shapes = [(np.zeros(nd), rng.uniform(0.75, 0.9, nd), 0.6)]
    for _ in range(n_ellipsoids):
        center = rng.uniform(-0.5, 0.5, nd)
        axes = rng.uniform(0.08, 0.4, nd)
        shapes.append((center, axes, float(rng.uniform(-0.3, 0.45))))
    for center, axes, value in shapes:
        if nd >= 2:
            theta = rng.uniform(0, np.pi)
            c, s = np.cos(theta), np.sin(theta)
        r2 = np.zeros(extents)
        coords = [g - c0 for g, c0 in zip(grids, center)]
        if nd >= 2:
            coords[-2], coords[-1] = c * coords[-2] + s * coords[-1], -s * coords[-2] + c * coords[-1]
        for x, a in zip(coords, axes):
            r2 += (x / a) ** 2
        vol[r2 <= 1] += value
        params.append({"center": center.tolist(), "axes": axes.tolist(), "value": value})
    vol = np.clip(vol, 0.0, 1.0)
    return Phantom(torch.from_numpy(vol), seed, params)


def make_coils(n_coils: int, extents: Sequence[int], seed: int = 0, width: float = 0.9) -> CoilProfileSet:
    """Smooth complex Gaussian profiles around the object, normalized to unit RSS."""
    if n_coils < 1:
        raise ValueError(f"need at least one coil, got {n_coils}")
    extents = tuple(int(e) for e in extents)
    rng = np.random.default_rng(seed)
    nd = len(extents)
    grids = np.meshgrid(*[np.linspace(-1, 1, e) for e in extents], indexing="ij")
    maps = np.empty((n_coils,) + extents, dtype=np.complex128)
    for i in range(n_coils):
        # coil centers on a ring in the last two axes, offset along F in 3D
        angle = 2 * np.pi * i / n_coils + rng.uniform(-0.2, 0.2)
        center = np.zeros(nd)
        center[-1] = 1.2 * np.cos(angle)
        if nd >= 2:
            center[-2] = 1.2 * np.sin(angle)
        if nd == 3:
            center[0] = rng.uniform(-0.3, 0.3)
        r2 = sum((g - c) ** 2 for g, c in zip(grids, center))
        mag = np.exp(-r2 / (2 * width**2))
        phase = rng.uniform(-np.pi, np.pi) + sum(rng.uniform(-1, 1) * g for g in grids)
        maps[i] = mag * np.exp(1j * phase)
    maps /= np.sqrt((np.abs(maps) ** 2).sum(0, keepdims=True))
    return CoilProfileSet(torch.from_numpy(maps))


def simulate_kspace(phantom: Phantom | Tensor, coils: CoilProfileSet, sigma: float = 0.0, seed: int = 0) -> Tensor:
    """Fully sampled coil k-space: centered FFT of S_i x plus complex white noise."""
    x = phantom.volume if isinstance(phantom, Phantom) else phantom
    maps = coils.maps
    if tuple(maps.shape[1:]) != tuple(x.shape):
        raise ValueError(f"coil extents {tuple(maps.shape[1:])} differ from phantom {tuple(x.shape)}")
    axes = tuple(range(1, maps.dim()))
    k = fftc(maps * x.to(maps.dtype), axes)
    if sigma > 0:
        gen = torch.Generator().manual_seed(seed)
        noise = torch.complex(
            torch.randn(k.shape, generator=gen, dtype=torch.float64),
            torch.randn(k.shape, generator=gen, dtype=torch.float64),
        )
        k = k + (sigma / np.sqrt(2)) * noise.to(k.dtype)
    return k


def _center_range(n: int, fraction: float) -> tuple[int, int]:
    width = max(int(round(fraction * n)), 1)
    start = n // 2 - width // 2
    return start, start + width


def make_mask(spec: MaskSpec, extents: Sequence[int]) -> Mask:
    """Undersampling mask over the phase axes (``extents`` are the phase extents)."""
    extents = tuple(int(e) for e in extents)
    if spec.kind == "random-1d":
        if len(extents) != 1:
            raise ValueError(f"random-1d masks one phase axis, got extents {extents}")
        (P,) = extents
        a, b = _center_range(P, spec.center_fraction)
        budget = int(round(P / spec.acceleration))
        if b - a > budget:
            raise ValueError(
                f"center alone ({b - a} lines) exceeds the {budget}-line budget for AF {spec.acceleration}"
            )
        rng = np.random.default_rng(spec.seed)
        outside = np.setdiff1d(np.arange(P), np.arange(a, b))
        chosen = rng.choice(outside, size=budget - (b - a), replace=False)
        m = np.zeros(P)
        m[a:b] = 1
        m[chosen] = 1
        return Mask(torch.from_numpy(m), AcsRegion(((a, b),)))
    if spec.kind == "equispaced-2d":
        if len(extents) != 2:
            raise ValueError(f"equispaced-2d masks two phase axes, got extents {extents}")
        R = int(round(np.sqrt(spec.acceleration)))
        if R * R != spec.acceleration:
            raise ValueError(f"equispaced-2d needs a square acceleration, got {spec.acceleration}")
        ranges = tuple(_center_range(n, spec.center_fraction) for n in extents)
        origins = tuple((n // 2) % R for n in extents)
        m = np.zeros(extents)
        m[origins[0] :: R, origins[1] :: R] = 1
        (a0, b0), (a1, b1) = ranges
        m[a0:b0, a1:b1] = 1
        if m.sum() > np.prod(extents):
            raise ValueError("mask budget exceeded")
        return Mask(torch.from_numpy(m), AcsRegion(ranges), tuple((R, o) for o in origins))
    raise ValueError(f"unknown mask kind {spec.kind!r}")


def apply_mask(k: Tensor, mask: Mask | Tensor) -> KSpaceVolume:
    """Zero unsampled phase positions of (N, F, *phase) k-space."""
    m = mask.mask if isinstance(mask, Mask) else mask
    if tuple(m.shape) != tuple(k.shape[2:]):
        raise ValueError(f"mask shape {tuple(m.shape)} does not match phase axes of {tuple(k.shape)}")
    data = k * m.to(k.real.dtype)
    if isinstance(mask, Mask):
        return KSpaceVolume(data, m, mask.acs, mask.lattice)
    return KSpaceVolume(data, m)


def zero_filled(kvol: KSpaceVolume) -> Tensor:
    """RSS magnitude of the inverse transform of the measured k-space."""
    return rss(ifftc(kvol.data, kvol.spatial_axes), dim=0)


def target_image(phantom: Phantom | Tensor, coils: CoilProfileSet) -> Tensor:
    """Ground truth: RSS of the noiseless coil images."""
    x = phantom.volume if isinstance(phantom, Phantom) else phantom
    return rss(coils.maps * x.to(coils.maps.dtype), dim=0)


# --- NAV1 container -------------------------------------------------------

MAGIC = b"NAV1"
_KINDS = {
    1: (torch.float32, "<f4"),
    2: (torch.float64, "<f8"),
    3: (torch.complex64, "<c8"),
    4: (torch.complex128, "<c16"),
    5: (torch.uint8, "<u1"),
}
_CODES = {dt: code for code, (dt, _) in _KINDS.items()}


class ContainerError(ValueError):
    pass


def _to_numpy(a) -> tuple[int, np.ndarray]:
    if isinstance(a, (bytes, bytearray)):
        return 5, np.frombuffer(bytes(a), dtype=np.uint8)
    if isinstance(a, np.ndarray):
        a = torch.from_numpy(np.ascontiguousarray(a))
    if not isinstance(a, Tensor):
        raise TypeError(f"cannot store {type(a).__name__}")
    a = a.detach().cpu()
    if a.dtype == torch.bool:
        a = a.to(torch.uint8)
    if a.dtype not in _CODES:
        raise TypeError(f"unsupported element kind {a.dtype}")
    code = _CODES[a.dtype]
    return code, a.contiguous().numpy().astype(_KINDS[code][1], copy=False)


def dumps_container(arrays: Mapping[str, object]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(arrays)))
    for name, a in arrays.items():
        code, arr = _to_numpy(a)
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes(order="C"))
    return buf.getvalue()


def loads_container(blob: bytes) -> dict[str, Tensor]:
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise ContainerError(f"truncated container at offset {pos}: expected {n} bytes of {what}")
        out = blob[pos : pos + n]
        pos += n
        return out

    if len(blob) < 4 or blob[:4] != MAGIC:
        raise ContainerError("bad magic at offset 0")
    pos = 4
    (count,) = struct.unpack("<I", take(4, "array count"))
    out: dict[str, Tensor] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = take(nlen, "name").decode("utf-8")
        if name in out:
            raise ContainerError(f"duplicate array name {name!r} at offset {pos}")
        at = pos
        code, rank = struct.unpack("<BB", take(2, "kind/rank"))
        if code not in _KINDS:
            raise ContainerError(f"unknown element kind code {code} at offset {at}")
        shape = struct.unpack(f"<{rank}Q", take(8 * rank, "extents"))
        dtype, np_dtype = _KINDS[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * np.dtype(np_dtype).itemsize
        payload = take(nbytes, f"payload of {name!r}")
        arr = np.frombuffer(payload, dtype=np_dtype).reshape(shape).copy()
        out[name] = torch.from_numpy(arr)
    if pos != len(blob):
        raise ContainerError(f"trailing bytes at offset {pos}")
    return out


def save_container(path: str | Path, arrays: Mapping[str, object]) -> None:
    names = list(arrays)
    if len(set(names)) != len(names):
        raise ContainerError("array names must be unique")
    Path(path).write_bytes(dumps_container(arrays))


def load_container(path: str | Path) -> dict[str, Tensor]:
    return loads_container(Path(path).read_bytes())


def encode_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True).encode("utf-8")


def decode_json(arr: Tensor):
    return json.loads(bytes(arr.numpy().tobytes()).decode("utf-8"))


def kspace_to_arrays(kvol: KSpaceVolume) -> dict[str, object]:
    out: dict[str, object] = {"kspace": kvol.data, "mask": kvol.mask}
    meta = {"acs": [list(r) for r in kvol.acs.ranges] if kvol.acs else None}
    meta["lattice"] = [list(x) for x in kvol.lattice] if kvol.lattice else None
    out["kspace_meta"] = encode_json(meta)
    return out


def kspace_from_arrays(arrays: Mapping[str, Tensor]) -> KSpaceVolume:
    meta = decode_json(arrays["kspace_meta"])
    acs = AcsRegion(tuple(tuple(r) for r in meta["acs"])) if meta["acs"] else None
    lattice = tuple(tuple(x) for x in meta["lattice"]) if meta["lattice"] else None
    return KSpaceVolume(arrays["kspace"], arrays["mask"], acs, lattice)
