"""FasterFC blocks, multi-coil reconstruction networks and a synthetic data toolkit."""
from __future__ import annotations

__version__ = "0.1.0"

from .blocks import FasterFCBlock, FFCBlock, TwoConvBlock, make_block, receptive_field_probe
from .fasnet import FasNet, FasNetSpec, merge_slices, split_slices
from .kspace import KNet, KNetSpec, RakiNet, RakiSpec, group_reconstruct, raki_infer, raki_train, soft_dc
from .metrics import MetricsReport, evaluate_volume, nmse, psnr, ssim
from .simdata import KSpaceVolume, MaskSpec, load_container, make_mask, make_phantom, save_container
from .unet import UNet, UNetSpec, count_params_closed_form, param_ratio
from .varnet import VarNet, VarNetSpec, dss

__all__ = [
    "FFCBlock", "FasNet", "FasNetSpec", "FasterFCBlock", "KNet", "KNetSpec", "KSpaceVolume", "MaskSpec",
    "MetricsReport", "RakiNet", "RakiSpec", "TwoConvBlock", "UNet", "UNetSpec", "VarNet", "VarNetSpec",
    "count_params_closed_form", "dss", "evaluate_volume", "group_reconstruct", "load_container", "make_block",
    "make_mask", "make_phantom", "merge_slices", "nmse", "param_ratio", "psnr", "raki_infer", "raki_train",
    "receptive_field_probe", "save_container", "soft_dc", "split_slices", "ssim",
]
