"""Image encoder mapping a frontal portrait to the conditioning latent ``z``."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..numerics import ShapeError


class LatentEncoder(nn.Module):
    """Four stride-2 conv stages and a frozen thumbnail branch feeding one linear head.

    The thumbnail branch average-pools the image to ``thumb x thumb`` and
    standardizes it with statistics fixed by :meth:`calibrate` on the training
    images. It is not trained, so subjects stay apart in ``z`` from the first
    step; the conv branch adds learned features on top.
    Input images are ``(B, H, W, 3)`` (or a single ``(H, W, 3)``) in ``[0, 1]``.
    """

    def __init__(self, latent_dim: int = 64, image_size: int = 64, widths=(16, 32, 64, 64), groups: int = 8,
                 thumb: int = 8):
        super().__init__()
        self.latent_dim = latent_dim
        self.image_size = image_size
        self.widths = tuple(widths)
        self.thumb = thumb
        layers = []
        ch = 3
        for wd in self.widths:
            layers += [nn.Conv2d(ch, wd, 3, stride=2, padding=1), nn.GroupNorm(min(groups, wd), wd), nn.SiLU()]
            ch = wd
        self.features = nn.Sequential(*layers)
        n_thumb = 3 * thumb * thumb
        self.head = nn.Linear(ch + n_thumb, latent_dim)
        self.register_buffer("thumb_mean", torch.full((n_thumb,), 0.5))
        self.register_buffer("thumb_scale", torch.tensor(0.5))

    def config(self) -> dict:
        return {"latent_dim": self.latent_dim, "image_size": self.image_size, "widths": list(self.widths),
                "thumb": self.thumb}

    @classmethod
    def from_config(cls, cfg: dict) -> "LatentEncoder":
        return cls(cfg["latent_dim"], cfg["image_size"], tuple(cfg["widths"]), thumb=cfg.get("thumb", 8))

    def _check(self, images: torch.Tensor) -> torch.Tensor:
        if images.ndim == 3:
            images = images.unsqueeze(0)
        if images.ndim != 4 or images.shape[1:] != (self.image_size, self.image_size, 3):
            raise ShapeError("encode_latent", "image", (self.image_size, self.image_size, 3),
                             tuple(images.shape[1:]))
        return images.to(self.head.weight.dtype).permute(0, 3, 1, 2)

    def thumbnails(self, images: torch.Tensor) -> torch.Tensor:
        return F.adaptive_avg_pool2d(self._check(images), self.thumb).flatten(1)

    @torch.no_grad()
    def calibrate(self, images: torch.Tensor) -> "LatentEncoder":
        """Fix the thumbnail statistics: per-entry mean, one global scale."""
        th = self.thumbnails(images)
        self.thumb_mean.copy_(th.mean(dim=0))
        self.thumb_scale.copy_((th - self.thumb_mean).std(unbiased=False).clamp(min=1e-6))
        return self

    def stats(self) -> dict:
        return {"mean": self.thumb_mean.tolist(), "scale": float(self.thumb_scale)}

    def load_stats(self, stats: dict) -> None:
        with torch.no_grad():
            self.thumb_mean.copy_(torch.tensor(stats["mean"]))
            self.thumb_scale.fill_(stats["scale"])

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        x = self._check(images)
        thumb = (F.adaptive_avg_pool2d(x, self.thumb).flatten(1) - self.thumb_mean) / self.thumb_scale
        return self.head(torch.cat([self.features(x * 2 - 1).mean(dim=(2, 3)), thumb], dim=-1))


def encode_latent(encoder: LatentEncoder, frontal: torch.Tensor) -> torch.Tensor:
    """``z`` for one image ``(H, W, 3)`` -> ``(D,)``, or a batch -> ``(B, D)``."""
    z = encoder(frontal)
    return z[0] if frontal.ndim == 3 else z

