"""Multi-contrast MR harmonization with attention-based anatomy fusion."""
from .imaging import (CONTRASTS, ContrastKind, DatasetManifest, Slice, Volume, extract_slices,
                      load_nifti, save_nifti, wm_peak_normalize)
from .metrics import dice, psnr, ssim

__version__ = "0.1.0"

__all__ = [
    "CONTRASTS", "ContrastKind", "DatasetManifest", "Slice", "Volume", "extract_slices", "load_nifti",
    "save_nifti", "wm_peak_normalize", "dice", "psnr", "ssim",
]
