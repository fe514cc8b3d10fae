from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from skimage.measure import marching_cubes


@dataclass
class Mesh:
    vertices: np.ndarray  # (V, 3) world units
    faces: np.ndarray     # (F, 3) zero-based

    @property
    def empty(self) -> bool:
        return len(self.faces) == 0


def grid_points(bbox, g: int) -> torch.Tensor:
    """Node positions of a ``g^3`` grid spanning ``bbox`` (inclusive), shape ``(g, g, g, 3)``."""
    axes = [torch.linspace(bbox[i], bbox[i + 3], g) for i in range(3)]
    return torch.stack(torch.meshgrid(*axes, indexing="ij"), dim=-1)


@torch.no_grad()
def density_grid(density_fn, bbox, g: int, chunk: int = 65536) -> np.ndarray:
    pts = grid_points(bbox, g).reshape(-1, 3)
    vals = torch.cat([density_fn(pts[i:i + chunk]) for i in range(0, pts.shape[0], chunk)])
    return vals.reshape(g, g, g).cpu().numpy()


def extract_mesh(density, iso: float, bbox=(-1.0, -1.0, -1.0, 1.0, 1.0, 1.0)) -> Mesh:
    """Marching-cubes iso-surface of a density sampled on a ``G^3`` node grid.

    Axis ``i`` of the grid runs along world x, ``j`` along y and ``k`` along z.
    A surface-free grid gives an empty mesh.
    """
    vol = np.asarray(density, dtype=np.float64)
    if vol.ndim != 3 or len(set(vol.shape)) != 1:
        raise ValueError(f"extract_mesh: expected a cubic G^3 grid, got {vol.shape}")
    g = vol.shape[0]
    if g < 8:
        raise ValueError(f"extract_mesh: grid size must be >= 8, got {g}")
    if not (vol.min() < iso < vol.max()):
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    lo = np.asarray(bbox[:3], dtype=np.float64)
    spacing = (np.asarray(bbox[3:], dtype=np.float64) - lo) / (g - 1)
    verts, faces, _, _ = marching_cubes(vol, level=iso, spacing=tuple(spacing))
    return Mesh(verts + lo, faces.astype(np.int64))


def write_obj(path, mesh: Mesh) -> None:
    lines = [f"v {x:.6f} {y:.6f} {z:.6f}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))
