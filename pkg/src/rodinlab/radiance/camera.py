from __future__ import annotations

import math
from dataclasses import dataclass

import torch


@dataclass(frozen=True)
class Camera:
    """Pinhole camera. ``fov`` is the vertical field of view in radians."""

    position: tuple[float, float, float]
    target: tuple[float, float, float] = (0.0, 0.0, 0.0)
    up: tuple[float, float, float] = (0.0, 1.0, 0.0)
    fov: float = 0.8
    width: int = 64
    height: int = 64

    def __post_init__(self):
        if math.dist(self.position, self.target) == 0:
            raise ValueError("Camera: position equals target")
        if not 0 < self.fov < math.pi:
            raise ValueError(f"Camera: fov must lie in (0, pi), got {self.fov}")
        if self.width < 1 or self.height < 1:
            raise ValueError("Camera: image extents must be positive")

    def basis(self) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        pos = torch.tensor(self.position, dtype=torch.float64)
        fwd = torch.tensor(self.target, dtype=torch.float64) - pos
        fwd = fwd / fwd.norm()
        right = torch.linalg.cross(fwd, torch.tensor(self.up, dtype=torch.float64))
        if float(right.norm()) < 1e-9:
            raise ValueError("Camera: up vector parallel to viewing direction")
        right = right / right.norm()
        up = torch.linalg.cross(right, fwd)
        return fwd, right, up

    def rays(self, rect: tuple[int, int, int, int] | None = None):
        """Ray origins, unit directions and flat pixel ids for a ``(row0, col0, h, w)`` rect.

        Pixel ``(r, c)`` has id ``r * width + c``; the ray passes through the pixel centre.
        """
        row0, col0, h, w = rect if rect is not None else (0, 0, self.height, self.width)
        fwd, right, up = self.basis()
        tan_half = math.tan(self.fov / 2)
        aspect = self.width / self.height
        rows = torch.arange(row0, row0 + h, dtype=torch.float64)
        cols = torch.arange(col0, col0 + w, dtype=torch.float64)
        rr, cc = torch.meshgrid(rows, cols, indexing="ij")
        x = ((cc + 0.5) / self.width * 2 - 1) * tan_half * aspect
        y = (1 - (rr + 0.5) / self.height * 2) * tan_half
        dirs = fwd + x[..., None] * right + y[..., None] * up
        dirs = dirs / dirs.norm(dim=-1, keepdim=True)
        dtype = torch.get_default_dtype()
        origins = torch.tensor(self.position, dtype=torch.float64).expand_as(dirs)
        ids = (rr.long() * self.width + cc.long())
        return origins.reshape(-1, 3).to(dtype), dirs.reshape(-1, 3).to(dtype), ids.reshape(-1)


def orbit_camera(azimuth: float, elevation: float, radius: float = 2.5, fov: float = 0.8,
                 size: int = 64) -> Camera:
    """Camera on a sphere around the origin; azimuth 0 / elevation 0 looks down -z (frontal)."""
    pos = (radius * math.cos(elevation) * math.sin(azimuth),
           radius * math.sin(elevation),
           radius * math.cos(elevation) * math.cos(azimuth))
    return Camera(position=pos, fov=fov, width=size, height=size)


def orbit_ring(n: int, elevation: float = 0.0, radius: float = 2.5, fov: float = 0.8, size: int = 64,
               phase: float = 0.0) -> list[Camera]:
    return [orbit_camera(phase + 2 * math.pi * i / n, elevation, radius, fov, size) for i in range(n)]
