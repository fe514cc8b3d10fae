"""Low-resolution condition corruption and the upsampler's training loss."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from ..numerics import resize_bilinear
from ..radiance.decoder import RadianceDecoder, TriPlaneField
from ..radiance.render import RenderConfig, render_patch
from ..triplane import TriPlane, roll_in, roll_out


@dataclass(frozen=True)
class AugmentParams:
    """Ranges for the corruption of ``y_HR`` into an LR condition.

    ``factors`` are downscale factors relative to HR; the downscaled planes are
    then resized to the target LR resolution.
    """

    factors: tuple[int, ...] = (2,)
    blur_sigma: tuple[float, float] = (0.0, 0.8)
    noise_std: tuple[float, float] = (0.0, 0.1)

    def __post_init__(self):
        if not self.factors or any(f < 1 for f in self.factors):
            raise ValueError("AugmentParams.factors must be non-empty and >= 1")
        for name in ("blur_sigma", "noise_std"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ValueError(f"AugmentParams.{name} must satisfy 0 <= lo <= hi, got {(lo, hi)}")

    @classmethod
    def null(cls, factor: int) -> "AugmentParams":
        return cls(factors=(factor,), blur_sigma=(0.0, 0.0), noise_std=(0.0, 0.0))


def gaussian_blur(planes: torch.Tensor, sigma: float) -> torch.Tensor:
    """Separable Gaussian blur per channel of ``(..., C, H, W)``, reflect padding."""
    if sigma <= 0:
        return planes
    radius = max(1, int(math.ceil(3 * sigma)))
    x = torch.arange(-radius, radius + 1, dtype=planes.dtype)
    k = torch.exp(-0.5 * (x / sigma) ** 2)
    k = k / k.sum()
    lead = planes.shape[:-2]
    h, w = planes.shape[-2:]
    flat = planes.reshape(-1, 1, h, w)
    radius_h = min(radius, h - 1)
    radius_w = min(radius, w - 1)
    kh = k[radius - radius_h: radius + radius_h + 1]
    kw = k[radius - radius_w: radius + radius_w + 1]
    flat = F.conv2d(F.pad(flat, (0, 0, radius_h, radius_h), mode="reflect"), (kh / kh.sum()).view(1, 1, -1, 1))
    flat = F.conv2d(F.pad(flat, (radius_w, radius_w, 0, 0), mode="reflect"), (kw / kw.sum()).view(1, 1, 1, -1))
    return flat.reshape(*lead, h, w)


def condition_augment(y_hr, params: AugmentParams, lr: int, generator: torch.Generator):
    """Blur, downscale, resize to ``lr`` and add noise; strengths drawn per sample.

    Accepts a ``TriPlane`` (returns a ``TriPlane``) or a rolled-out batch
    ``(B, C, H, 3H)`` (returns a rolled-out batch at ``lr``).
    """
    if isinstance(y_hr, TriPlane):
        out = condition_augment(roll_out(y_hr.planes).unsqueeze(0), params, lr, generator)
        return TriPlane(roll_in(out[0]), y_hr.bbox)
    planes = roll_in(y_hr)                                   # (B, 3, C, H, W)
    hr = planes.shape[-1]
    out = []
    for b in range(planes.shape[0]):
        p = planes[b]
        lo, hi = params.blur_sigma
        sigma = lo + (hi - lo) * float(torch.rand((), generator=generator, dtype=torch.float64))
        factor = params.factors[int(torch.randint(len(params.factors), (), generator=generator))]
        lo, hi = params.noise_std
        std = lo + (hi - lo) * float(torch.rand((), generator=generator, dtype=torch.float64))
        p = gaussian_blur(p, sigma)
        size = max(2, hr // factor)
        p = resize_bilinear(p, size)
        if size != lr:
            p = resize_bilinear(p, lr)
        if std > 0:
            p = p + std * torch.randn(p.shape, generator=generator, dtype=p.dtype)
        out.append(p)
    return roll_out(torch.stack(out))


def image_gradient_mse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """MSE between forward differences along rows and columns of ``(..., H, W, 3)`` images."""
    dxa, dxb = a[..., :, 1:, :] - a[..., :, :-1, :], b[..., :, 1:, :] - b[..., :, :-1, :]
    dya, dyb = a[..., 1:, :, :] - a[..., :-1, :, :], b[..., 1:, :, :] - b[..., :-1, :, :]
    return ((dxa - dxb) ** 2).mean() + ((dya - dyb) ** 2).mean()


def image_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Pixel MSE plus image-gradient MSE."""
    return ((pred - target) ** 2).mean() + image_gradient_mse(pred, target)


def loss_upsampler(x0_hat: torch.Tensor, y_hr: torch.Tensor, decoder: RadianceDecoder | None = None,
                   cameras=None, w_tri: float = 1.0, w_img: float = 0.0, patch: int = 16,
                   generator: torch.Generator | None = None, render: RenderConfig | None = None,
                   scale: float = 1.0) -> torch.Tensor:
    """``w_tri * ||x0_hat - y_hr||^2 + w_img * L_img`` on rolled-out batches.

    ``L_img`` renders one random patch per sample from both tri-planes (features
    multiplied back by ``scale``) with identical cameras and jitter and compares
    them with :func:`image_loss`. ``cameras`` is one camera list per sample.
    """
    loss = w_tri * ((x0_hat - y_hr) ** 2).mean()
    if w_img == 0.0:
        return loss
    if decoder is None or cameras is None:
        raise ValueError("loss_upsampler: image term needs a decoder and cameras")
    generator = generator or torch.Generator().manual_seed(0)
    rc = render or RenderConfig(n_samples=24)
    terms = []
    for b in range(x0_hat.shape[0]):
        cams = cameras[b]
        cam = cams[int(torch.randint(len(cams), (), generator=generator))]
        row = int(torch.randint(cam.height - patch + 1, (), generator=generator))
        col = int(torch.randint(cam.width - patch + 1, (), generator=generator))
        seed = int(torch.randint(2 ** 31 - 1, (), generator=generator))
        cfg = RenderConfig(rc.n_samples, rc.near, rc.far, rc.background, jitter=True, seed=seed)
        pred_tp = TriPlane(roll_in(x0_hat[b]) * scale)
        pred = render_patch(TriPlaneField(pred_tp, decoder), cam, (row, col, patch, patch), cfg)
        with torch.no_grad():
            gt_tp = TriPlane(roll_in(y_hr[b]) * scale)
            gt = render_patch(TriPlaneField(gt_tp, decoder), cam, (row, col, patch, patch), cfg)
        terms.append(image_loss(pred, gt))
    return loss + w_img * torch.stack(terms).mean()
