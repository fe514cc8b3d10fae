from __future__ import annotations

import math

import numpy as np
import torch
from scipy.ndimage import gaussian_filter

PSNR_CAP = 99.0


def _np(img) -> np.ndarray:
    if isinstance(img, torch.Tensor):
        img = img.detach().cpu().numpy()
    return np.asarray(img, dtype=np.float64)


def psnr(a, b, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical images return the 99 dB sentinel."""
    a, b = _np(a), _np(b)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(data_range ** 2 / mse))


def ssim(a, b, data_range: float = 1.0, sigma: float = 1.5) -> float:
    """Mean SSIM with a Gaussian window (sigma 1.5, truncated at 3.5 sigma), averaged over channels."""
    a, b = _np(a), _np(b)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    scores = []
    for ch in range(a.shape[-1]):
        x, y = a[..., ch], b[..., ch]
        blur = lambda img: gaussian_filter(img, sigma=sigma, truncate=3.5, mode="reflect")
        mx, my = blur(x), blur(y)
        vx = blur(x * x) - mx * mx
        vy = blur(y * y) - my * my
        cxy = blur(x * y) - mx * my
        s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2))
        pad = int(3.5 * sigma + 0.5)
        scores.append(s[pad:-pad, pad:-pad].mean())
    return float(np.mean(scores))
