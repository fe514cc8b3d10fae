from .camera import Camera, orbit_camera, orbit_ring
from .decoder import RadianceDecoder, TriPlaneField, decode
from .imageio import read_png, read_ppm, to_bytes, write_png, write_ppm
from .mesh import Mesh, density_grid, extract_mesh, grid_points, write_obj
from .render import (FunctionField, RayBatch, RenderConfig, composite, ray_box, render_image,
                     render_patch, render_ray, render_rays, stratified_offsets)

__all__ = [
    "Camera", "orbit_camera", "orbit_ring", "RadianceDecoder", "TriPlaneField", "decode",
    "read_png", "read_ppm", "to_bytes", "write_png", "write_ppm", "Mesh", "density_grid",
    "extract_mesh", "grid_points", "write_obj", "FunctionField", "RayBatch", "RenderConfig",
    "composite", "ray_box", "render_image", "render_patch", "render_ray", "render_rays",
    "stratified_offsets",
]
