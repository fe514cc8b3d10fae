"""Volumetric rendering by stratified quadrature inside the field's bounding box.

Each ray is clipped to the bbox (and to ``[near, far]``), the clipped segment is cut
into ``n_samples`` equal bins, and one sample is placed per bin (bin centre, or a
jittered position). Bin widths are the quadrature deltas, so a ray through a
constant density ``s`` over length ``L`` has opacity exactly ``1 - exp(-s L)``.

Jitter offsets are a pure function of ``(seed, pixel id, sample index)``; a patch
render therefore reproduces the matching crop of a full render bit for bit.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np
import torch

from .camera import Camera


class Field(Protocol):
    bbox: tuple[float, ...]

    def __call__(self, points: torch.Tensor, dirs: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        ...


@dataclass(frozen=True)
class RenderConfig:
    n_samples: int = 32
    near: float = 0.0
    far: float = 100.0
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)
    jitter: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 2:
            raise ValueError(f"RenderConfig.n_samples must be >= 2, got {self.n_samples}")
        if not self.near < self.far:
            raise ValueError("RenderConfig: near must be < far")


@dataclass
class RayBatch:
    color: torch.Tensor      # (N, 3)
    weights: torch.Tensor    # (N, S)
    opacity: torch.Tensor    # (N,)  sum of weights
    residual: torch.Tensor   # (N,)  transmittance left after the last sample
    t: torch.Tensor          # (N, S) sample distances
    deltas: torch.Tensor     # (N, S) bin widths
    sigma: torch.Tensor      # (N, S)
    hit: torch.Tensor        # (N,) bool


_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (x + np.uint64(0x9E3779B97F4A7C15)) & _MASK64
        z = ((z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & _MASK64
        z = ((z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & _MASK64
        return z ^ (z >> np.uint64(31))


def stratified_offsets(seed: int, ray_ids: torch.Tensor, n_samples: int) -> torch.Tensor:
    """Uniform ``[0, 1)`` offsets keyed by ``(seed, ray id, sample index)``."""
    key = _splitmix64(np.array([seed & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64))
    ids = ray_ids.cpu().numpy().astype(np.uint64)
    counter = ids[:, None] * np.uint64(n_samples) + np.arange(n_samples, dtype=np.uint64)[None, :]
    h = _splitmix64(_splitmix64(counter) ^ key)
    u = (h >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
    return torch.from_numpy(u).to(torch.get_default_dtype())


def ray_box(origins: torch.Tensor, dirs: torch.Tensor, bbox) -> tuple[torch.Tensor, torch.Tensor]:
    """Slab intersection; returns entry and exit distances (exit < entry on a miss)."""
    lo = origins.new_tensor(bbox[:3])
    hi = origins.new_tensor(bbox[3:])
    safe = torch.where(dirs.abs() < 1e-12, torch.full_like(dirs, 1e-12), dirs)
    t_lo = (lo - origins) / safe
    t_hi = (hi - origins) / safe
    t_near = torch.minimum(t_lo, t_hi).amax(dim=-1)
    t_far = torch.maximum(t_lo, t_hi).amin(dim=-1)
    return t_near, t_far


def composite(sigma: torch.Tensor, rgb: torch.Tensor, deltas: torch.Tensor, background: torch.Tensor):
    """Alpha compositing. Returns (color, weights, opacity, residual transmittance)."""
    tau = sigma * deltas
    alpha = 1.0 - torch.exp(-tau)
    acc = torch.cumsum(tau, dim=-1)
    trans = torch.exp(-(acc - tau))
    weights = trans * alpha
    opacity = weights.sum(dim=-1)
    color = (weights.unsqueeze(-1) * rgb).sum(dim=-2) + (1.0 - opacity).unsqueeze(-1) * background
    return color, weights, opacity, torch.exp(-acc[..., -1])


def render_rays(field: Field, origins: torch.Tensor, dirs: torch.Tensor, cfg: RenderConfig,
                ray_ids: torch.Tensor | None = None, offsets: torch.Tensor | None = None) -> RayBatch:
    n, s = origins.shape[0], cfg.n_samples
    t0, t1 = ray_box(origins, dirs, field.bbox)
    a = t0.clamp(min=cfg.near)
    b = t1.clamp(max=cfg.far)
    hit = b > a
    a = torch.where(hit, a, torch.zeros_like(a))
    length = torch.where(hit, b - a, torch.zeros_like(a))
    if offsets is None:
        if cfg.jitter:
            ids = ray_ids if ray_ids is not None else torch.arange(n)
            offsets = stratified_offsets(cfg.seed, ids, s).to(origins.dtype)
        else:
            offsets = torch.full((n, s), 0.5, dtype=origins.dtype)
    step = (length / s).unsqueeze(-1)
    t = a.unsqueeze(-1) + (torch.arange(s, dtype=origins.dtype) + offsets) * step
    deltas = step.expand(n, s)
    pts = origins.unsqueeze(1) + t.unsqueeze(-1) * dirs.unsqueeze(1)
    lo = origins.new_tensor(field.bbox[:3])
    hi = origins.new_tensor(field.bbox[3:])
    pts = torch.where(hit.view(n, 1, 1), pts, (lo + hi) / 2)
    pts = torch.maximum(torch.minimum(pts, hi), lo)
    rgb, sigma = field(pts, dirs)
    bg = origins.new_tensor(cfg.background)
    color, weights, opacity, residual = composite(sigma, rgb, deltas, bg)
    return RayBatch(color, weights, opacity, residual, t, deltas, sigma, hit)


def render_ray(field: Field, origin, direction, cfg: RenderConfig):
    """Single-ray convenience: ``(color (3,), weights (S,), alpha)``."""
    o = torch.as_tensor(origin, dtype=torch.get_default_dtype()).reshape(1, 3)
    d = torch.as_tensor(direction, dtype=torch.get_default_dtype()).reshape(1, 3)
    d = d / d.norm()
    out = render_rays(field, o, d, cfg)
    return out.color[0], out.weights[0], out.opacity[0]


def _render_rect(field: Field, cam: Camera, rect, cfg: RenderConfig, chunk: int) -> torch.Tensor:
    origins, dirs, ids = cam.rays(rect)
    colors = [render_rays(field, origins[i:i + chunk], dirs[i:i + chunk], cfg, ray_ids=ids[i:i + chunk]).color
              for i in range(0, origins.shape[0], chunk)]
    return torch.cat(colors).reshape(rect[2], rect[3], 3)


def render_image(field: Field, cam: Camera, cfg: RenderConfig, chunk: int = 4096) -> torch.Tensor:
    """Full ``(H, W, 3)`` render, one ray per pixel centre."""
    return _render_rect(field, cam, (0, 0, cam.height, cam.width), cfg, chunk)


def render_patch(field: Field, cam: Camera, rect: tuple[int, int, int, int], cfg: RenderConfig,
                 chunk: int = 4096) -> torch.Tensor:
    """Render the ``(row0, col0, h, w)`` window of the image ``cam`` would produce."""
    row0, col0, h, w = rect
    if row0 < 0 or col0 < 0 or h < 1 or w < 1 or row0 + h > cam.height or col0 + w > cam.width:
        raise ValueError(f"render_patch: rect {rect} outside {cam.height}x{cam.width} image")
    return _render_rect(field, cam, rect, cfg, chunk)


class FunctionField:
    """Adapter for closures ``(points, dirs) -> (rgb, sigma)`` with an explicit bbox."""

    def __init__(self, fn: Callable, bbox=(-1.0, -1.0, -1.0, 1.0, 1.0, 1.0)):
        self.fn = fn
        self.bbox = tuple(bbox)

    def __call__(self, points, dirs):
        return self.fn(points, dirs)
