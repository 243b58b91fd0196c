"""Prior-guided hyperspectral/multispectral image fusion on a small numpy autodiff core."""

from .data import (FusionSample, HsiCube, SpectralResponse, build_dataset, cube_io, degrade_lrhsi,
                   extract_patches, read_cube, simulate_hrmsi, synth_scene, write_cube)
from .losses import LossBreakdown, composite_loss
from .metrics import MetricsReport, ergas, evaluate, psnr, sam, ssim
from .model import PifNet, PifNetConfig, load_checkpoint, parameter_count, pifnet_forward, save_checkpoint
from .tensor import Parameter, Tensor, backward, no_grad

__version__ = "0.1.0"

__all__ = [
    "FusionSample", "HsiCube", "SpectralResponse", "build_dataset", "cube_io", "degrade_lrhsi",
    "extract_patches", "read_cube", "simulate_hrmsi", "synth_scene", "write_cube",
    "LossBreakdown", "composite_loss", "MetricsReport", "ergas", "evaluate", "psnr", "sam", "ssim",
    "PifNet", "PifNetConfig", "load_checkpoint", "parameter_count", "pifnet_forward", "save_checkpoint",
    "Parameter", "Tensor", "backward", "no_grad",
]
