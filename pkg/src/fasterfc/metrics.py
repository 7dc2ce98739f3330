"""Image-quality metrics.

SSIM uses a uniform 7x7 window, k1 = 0.01, k2 = 0.03, sample covariance, and
averages the local index over windows that fit entirely inside the image.
The data range is the maximum of the ground-truth volume.  3D volumes are
scored slice by slice along the first axis.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

WIN = 7
K1, K2 = 0.01, 0.03


def _as_tensor(a) -> Tensor:
    return a if isinstance(a, Tensor) else torch.from_numpy(np.asarray(a, dtype=np.float64))


def _check_pair(pred: Tensor, gt: Tensor) -> None:
    if tuple(pred.shape) != tuple(gt.shape):
        raise ValueError(f"prediction shape {tuple(pred.shape)} differs from ground truth {tuple(gt.shape)}")


def nmse(pred, gt) -> float:
    pred, gt = _as_tensor(pred), _as_tensor(gt)
    _check_pair(pred, gt)
    den = float((gt.double() ** 2).sum())
    if den == 0:
        raise ValueError("NMSE undefined for an all-zero ground truth")
    return float(((pred.double() - gt.double()) ** 2).sum()) / den


def psnr(pred, gt, data_range: float | None = None) -> float:
    """Peak SNR in dB; ``inf`` when the prediction is exact."""
    pred, gt = _as_tensor(pred), _as_tensor(gt)
    _check_pair(pred, gt)
    peak = float(gt.max()) if data_range is None else data_range
    mse = float(((pred.double() - gt.double()) ** 2).mean())
    if mse == 0:
        return math.inf
    return 10 * math.log10(peak**2 / mse)


def ssim_map(pred: Tensor, gt: Tensor, data_range: float | Tensor) -> Tensor:
    """Local SSIM over valid 7x7 windows of (B, H, W) images."""
    if pred.dim() != 3:
        raise ValueError(f"expected (slices, H, W), got {tuple(pred.shape)}")
    _check_pair(pred, gt)
    if min(pred.shape[-2:]) < WIN:
        raise ValueError(f"images must be at least {WIN}x{WIN}, got {tuple(pred.shape[-2:])}")
    x, y = pred.unsqueeze(1), gt.unsqueeze(1)
    w = torch.full((1, 1, WIN, WIN), 1.0 / WIN**2, dtype=x.dtype)
    mx, my = F.conv2d(x, w), F.conv2d(y, w)
    cov_norm = WIN**2 / (WIN**2 - 1)
    vx = cov_norm * (F.conv2d(x * x, w) - mx * mx)
    vy = cov_norm * (F.conv2d(y * y, w) - my * my)
    vxy = cov_norm * (F.conv2d(x * y, w) - mx * my)
    c1, c2 = (K1 * data_range) ** 2, (K2 * data_range) ** 2
    s = (2 * mx * my + c1) * (2 * vxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return s.squeeze(1)


def ssim_torch(pred: Tensor, gt: Tensor, data_range: float | Tensor | None = None) -> Tensor:
    """Differentiable mean SSIM of 2D images or 3D volumes (slice-wise)."""
    if pred.dim() == 2:
        pred, gt = pred.unsqueeze(0), gt.unsqueeze(0)
    if data_range is None:
        data_range = gt.detach().max()
    return ssim_map(pred, gt, data_range).mean()


def ssim_loss(pred: Tensor, gt: Tensor, data_range: float | Tensor | None = None) -> Tensor:
    return 1 - ssim_torch(pred, gt, data_range)


def ssim(pred, gt, data_range: float | None = None) -> float:
    pred, gt = _as_tensor(pred).double(), _as_tensor(gt).double()
    return float(ssim_torch(pred, gt, data_range))


def evaluate_volume(pred, gt) -> list[dict]:
    """Per-slice NMSE, PSNR and SSIM of a 3D volume; data range from the whole volume."""
    pred, gt = _as_tensor(pred).double(), _as_tensor(gt).double()
    _check_pair(pred, gt)
    if pred.dim() == 2:
        pred, gt = pred.unsqueeze(0), gt.unsqueeze(0)
    peak = float(gt.max())
    rows = []
    for i in range(gt.shape[0]):
        p, g = pred[i], gt[i]
        rows.append(
            {
                "slice": i,
                "nmse": nmse(p, g) if float((g**2).sum()) > 0 else math.nan,
                "psnr": psnr(p, g, peak),
                "ssim": float(ssim_torch(p, g, peak)),
            }
        )
    return rows


@dataclass
class MetricsReport:
    """Per-slice rows plus their means; serializes to the slice CSV."""

    rows: list[dict]

    @classmethod
    def from_volume(cls, pred, gt) -> "MetricsReport":
        return cls(evaluate_volume(pred, gt))

    def means(self) -> dict[str, float]:
        return {k: float(np.nanmean([r[k] for r in self.rows])) for k in ("nmse", "psnr", "ssim")}

    def to_csv(self, header: str | None = None) -> str:
        lines = [f"# {header}"] if header else []
        lines.append("slice-index,nmse,psnr,ssim")
        for r in self.rows:
            lines.append(f"{r['slice']},{r['nmse']:.10g},{r['psnr']:.10g},{r['ssim']:.10g}")
        return "\n".join(lines) + "\n"
