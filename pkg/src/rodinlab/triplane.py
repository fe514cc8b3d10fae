"""Tri-plane feature storage, point queries, Fourier features, roll-out and rescaling.

A point ``p = (u, v, w)`` in the normalized unit cube projects to the three planes as
``p_uv = (u, v)``, ``p_wu = (w, u)`` and ``p_vw = (v, w)``. The first coordinate of a
projection runs along plane columns and the second along rows, so the ``uv`` plane
has ``u`` across its width and ``v`` down its height.

In memory the planes are one channel-first tensor ``(3, C, H, W)`` in the order
(uv, wu, vw). A rolled-out tri-plane is ``(C, H, 3W)``.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .numerics import ShapeError, bilinear_taps, check_finite, resize_bilinear

PLANE_NAMES = ("uv", "wu", "vw")
# (column axis, row axis) of each plane, as indices into (u, v, w)
PROJECTIONS = ((0, 1), (2, 0), (1, 2))
DEFAULT_BBOX = (-1.0, -1.0, -1.0, 1.0, 1.0, 1.0)

_MAGIC = b"TPLN"
_VERSION = 1


@dataclass(frozen=True)
class FourierSpec:
    bands: int = 4
    base: float = math.pi

    def __post_init__(self):
        if self.bands < 0:
            raise ValueError(f"FourierSpec.bands must be >= 0, got {self.bands}")

    def embed_dim(self, channels: int) -> int:
        return 2 * self.bands * channels


@dataclass(eq=False)
class TriPlane:
    """Three axis-aligned feature planes housing one subject's radiance field."""

    planes: torch.Tensor
    bbox: tuple[float, float, float, float, float, float] = DEFAULT_BBOX

    def __post_init__(self):
        p = self.planes
        if p.ndim != 4 or p.shape[0] != 3:
            raise ShapeError("TriPlane", "planes", "(3, C, H, W)", tuple(p.shape))
        if p.shape[2] != p.shape[3]:
            raise ShapeError("TriPlane", "width", p.shape[2], p.shape[3])
        lo, hi = np.asarray(self.bbox[:3]), np.asarray(self.bbox[3:])
        if len(self.bbox) != 6 or not np.all(hi > lo):
            raise ValueError(f"TriPlane: degenerate bbox {self.bbox}")
        self.bbox = tuple(float(b) for b in self.bbox)

    @property
    def resolution(self) -> int:
        return self.planes.shape[-1]

    @property
    def channels(self) -> int:
        return self.planes.shape[1]

    @property
    def y_uv(self) -> torch.Tensor:
        return self.planes[0]

    @property
    def y_wu(self) -> torch.Tensor:
        return self.planes[1]

    @property
    def y_vw(self) -> torch.Tensor:
        return self.planes[2]

    @classmethod
    def random(cls, resolution: int = 32, channels: int = 8, std: float = 0.1,
               generator: torch.Generator | None = None, bbox=DEFAULT_BBOX) -> "TriPlane":
        planes = torch.randn(3, channels, resolution, resolution, generator=generator) * std
        return cls(planes, bbox)

    @classmethod
    def zeros(cls, resolution: int = 32, channels: int = 8, bbox=DEFAULT_BBOX) -> "TriPlane":
        return cls(torch.zeros(3, channels, resolution, resolution), bbox)

    def normalize(self, points: torch.Tensor) -> torch.Tensor:
        """Map world points into the unit cube spanned by ``bbox``."""
        lo = points.new_tensor(self.bbox[:3])
        hi = points.new_tensor(self.bbox[3:])
        return (points - lo) / (hi - lo)

    def detach(self) -> "TriPlane":
        return TriPlane(self.planes.detach().clone(), self.bbox)

    def feature_range(self) -> tuple[float, float]:
        return float(self.planes.min()), float(self.planes.max())


def query_planes(planes: torch.Tensor, p01: torch.Tensor) -> torch.Tensor:
    """Sum of the three bilinear plane lookups for unit-cube points ``p01 (..., 3)``.

    ``planes`` is ``(3, C, R, R)``. Coordinates are expected inside the cube; values
    beyond it read the border texels.
    """
    _, c, h, w = planes.shape
    lead = p01.shape[:-1]
    pts = p01.reshape(-1, 3)
    uv = torch.stack([pts[:, [a, b]] for a, b in PROJECTIONS], dim=1)  # (M, 3, 2)
    idx, wts = bilinear_taps(uv, h, w)  # (M, 3, 4)
    offsets = torch.arange(3, device=idx.device).view(1, 3, 1) * (h * w)
    flat = planes.permute(0, 2, 3, 1).reshape(3 * h * w, c)
    taps = flat[(idx + offsets).reshape(-1)].reshape(-1, 12, c)
    feats = (wts.reshape(-1, 12, 1) * taps).sum(dim=1)
    return feats.reshape(*lead, c)


def query_features(tp: TriPlane, points: torch.Tensor, checked: bool = True) -> torch.Tensor:
    """Feature ``y_p = y_uv(p_uv) + y_wu(p_wu) + y_vw(p_vw)`` at world points ``(..., 3)``."""
    if points.shape[-1] != 3:
        raise ShapeError("query_features", "point dim", 3, points.shape[-1])
    p01 = tp.normalize(points)
    if checked:
        check_finite(p01, "query point")
        tol = 1e-9
        if bool(((p01 < -tol) | (p01 > 1 + tol)).any()):
            raise ValueError("query_features: point outside the tri-plane bbox")
    p01 = p01.clamp(0.0, 1.0)
    return query_planes(tp.planes, p01)


def fourier_embed(y: torch.Tensor, spec: FourierSpec) -> torch.Tensor:
    """``[sin(2^b pi y) for b] ++ [cos(2^b pi y) for b]`` flattened over (band, channel)."""
    if spec.bands == 0:
        return y.new_zeros(*y.shape[:-1], 0)
    freqs = spec.base * (2.0 ** torch.arange(spec.bands, dtype=y.dtype, device=y.device))
    arg = y.unsqueeze(-2) * freqs.unsqueeze(-1)  # (..., B, C)
    flat = arg.flatten(-2)
    return torch.cat([torch.sin(flat), torch.cos(flat)], dim=-1)


def roll_out(planes) -> torch.Tensor:
    """``(..., 3, C, H, W)`` -> ``(..., C, H, 3W)``, planes stacked left to right."""
    if isinstance(planes, TriPlane):
        planes = planes.planes
    if planes.ndim < 4 or planes.shape[-4] != 3:
        raise ShapeError("roll_out", "plane axis", 3, tuple(planes.shape))
    return torch.cat(planes.unbind(dim=-4), dim=-1)


def roll_in(rolled: torch.Tensor) -> torch.Tensor:
    """Inverse of :func:`roll_out`."""
    width = rolled.shape[-1]
    if width % 3:
        raise ShapeError("roll_in", "width (multiple of 3)", "3W", width)
    return torch.stack(rolled.split(width // 3, dim=-1), dim=-4)


def rescale(tp: TriPlane, new_res: int) -> TriPlane:
    """Per-plane bilinear resize; channels and bbox unchanged."""
    if new_res < 2:
        raise ValueError(f"rescale: new_res must be >= 2, got {new_res}")
    return TriPlane(resize_bilinear(tp.planes, new_res), tp.bbox)


def save_triplane(path, tp: TriPlane) -> None:
    """Write the ``.tpln`` format: header, bbox, then (uv, wu, vw) planes as row-major H x W x C f32."""
    planes = tp.planes.detach().cpu()
    _, c, h, w = planes.shape
    header = _MAGIC + struct.pack("<HIII", _VERSION, h, w, c) + struct.pack("<6f", *tp.bbox)
    data = planes.permute(0, 2, 3, 1).contiguous().numpy().astype("<f4", copy=False)
    Path(path).write_bytes(header + data.tobytes())


def load_triplane(path) -> TriPlane:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not a tri-plane file (bad magic)")
    version, h, w, c = struct.unpack_from("<HIII", raw, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported tri-plane version {version}")
    bbox = struct.unpack_from("<6f", raw, 18)
    count = 3 * h * w * c
    data = np.frombuffer(raw, dtype="<f4", count=count, offset=42)
    if len(raw) != 42 + 4 * count:
        raise ValueError(f"{path}: truncated or oversized payload")
    planes = torch.from_numpy(data.reshape(3, h, w, c).copy()).permute(0, 3, 1, 2).contiguous()
    planes = planes.to(torch.get_default_dtype())
    return TriPlane(planes, bbox)
