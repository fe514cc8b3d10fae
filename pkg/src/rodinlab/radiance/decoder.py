from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..numerics import ShapeError
from ..triplane import FourierSpec, TriPlane, fourier_embed, query_features


class RadianceDecoder(nn.Module):
    """Shared 4-layer MLP: ``(y_p, fourier(y_p), d) -> (rgb, sigma)``.

    Hidden layers use ReLU; density goes through softplus (>= 0) and color
    through a sigmoid (in [0, 1]). Output head layout is [density, r, g, b].
    """

    def __init__(self, channels: int = 8, hidden: int = 64, fourier: FourierSpec = FourierSpec(),
                 n_layers: int = 4):
        super().__init__()
        if n_layers < 2:
            raise ValueError("RadianceDecoder needs at least 2 layers")
        self.channels = channels
        self.hidden = hidden
        self.fourier = fourier
        self.in_dim = channels + fourier.embed_dim(channels) + 3
        dims = [self.in_dim] + [hidden] * (n_layers - 1) + [4]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))
        for layer in self.layers:
            # fan-in scaled init
            nn.init.kaiming_uniform_(layer.weight, nonlinearity="relu")
            nn.init.zeros_(layer.bias)

    def config(self) -> dict:
        return {"channels": self.channels, "hidden": self.hidden, "bands": self.fourier.bands,
                "base": self.fourier.base, "n_layers": len(self.layers)}

    @classmethod
    def from_config(cls, cfg: dict) -> "RadianceDecoder":
        return cls(cfg["channels"], cfg["hidden"], FourierSpec(cfg["bands"], cfg["base"]), cfg["n_layers"])

    def raw(self, y: torch.Tensor, d: torch.Tensor) -> torch.Tensor:
        h = torch.cat([y, fourier_embed(y, self.fourier), d], dim=-1)
        if h.shape[-1] != self.in_dim:
            raise ShapeError("decode", "decoder input", self.in_dim, h.shape[-1])
        for layer in self.layers[:-1]:
            h = F.relu(layer(h))
        return self.layers[-1](h)

    def forward(self, y: torch.Tensor, d: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        out = self.raw(y, d)
        return torch.sigmoid(out[..., 1:4]), F.softplus(out[..., 0])

    def density(self, y: torch.Tensor, d: torch.Tensor | None = None) -> torch.Tensor:
        if d is None:
            d = y.new_zeros(*y.shape[:-1], 3)
            d[..., 2] = 1.0
        return F.softplus(self.raw(y, d)[..., 0])


def decode(y_p: torch.Tensor, d: torch.Tensor, dec: RadianceDecoder, spec: FourierSpec | None = None,
           checked: bool = True):
    """Color and density for queried features ``y_p (..., C)`` seen along unit directions ``d``."""
    if spec is not None and spec != dec.fourier:
        raise ValueError(f"decode: FourierSpec {spec} does not match decoder's {dec.fourier}")
    if y_p.shape[-1] != dec.channels:
        raise ShapeError("decode", "feature channels", dec.channels, y_p.shape[-1])
    if d.shape[-1] != 3:
        raise ShapeError("decode", "direction dim", 3, d.shape[-1])
    if checked:
        norm = d.norm(dim=-1)
        if bool(((norm - 1).abs() > 1e-6).any()):
            raise ValueError("decode: view directions must be unit length (tol 1e-6)")
    return dec(y_p, d.expand(*y_p.shape[:-1], 3))


class TriPlaneField:
    """Radiance field view of a tri-plane plus decoder, for the renderer."""

    def __init__(self, tp: TriPlane, decoder: RadianceDecoder):
        if tp.channels != decoder.channels:
            raise ShapeError("TriPlaneField", "channels", decoder.channels, tp.channels)
        self.tp = tp
        self.decoder = decoder
        self.bbox = tp.bbox

    def features(self, points: torch.Tensor) -> torch.Tensor:
        return query_features(self.tp, points, checked=False)

    def __call__(self, points: torch.Tensor, dirs: torch.Tensor):
        y = self.features(points)
        d = dirs.unsqueeze(-2).expand(*points.shape[:-1], 3) if dirs.ndim == points.ndim - 1 else dirs
        return self.decoder(y, d)

    def density(self, points: torch.Tensor) -> torch.Tensor:
        return self.decoder.density(self.features(points))
