"""Procedural head-like subjects with analytic density and color fields.

Ground-truth views are rendered straight from the analytic field with fine
quadrature, so every view of a subject is consistent with one 3D volume.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..radiance.camera import Camera, orbit_camera
from ..radiance.render import RenderConfig, render_image

BBOX = (-1.0, -1.0, -1.0, 1.0, 1.0, 1.0)
ELEVATION_BAND = (-20.0, 30.0)  # degrees
ORBIT_RADIUS = 2.5
FOV = 0.8
SIGMA_MAX = 30.0
EDGE = 0.03
GLASSES_COLOR = (0.12, 0.12, 0.15)

PARAM_RANGES = {
    "head_axes": ((0.42, 0.52, 0.46), (0.55, 0.66, 0.58)),
    "skin": ((0.55, 0.35, 0.25), (0.95, 0.80, 0.70)),
    "hair_level": (-0.2, 0.35),
    "hair_scale": (1.06, 1.14),
    "hair_color": ((0.05, 0.03, 0.02), (0.75, 0.55, 0.35)),
    "nose_radius": (0.08, 0.13),
    "glasses_radius": (0.09, 0.13),
}


@dataclass
class SubjectParams:
    head_axes: tuple[float, float, float]
    skin: tuple[float, float, float]
    hair_level: float
    hair_scale: float
    hair_color: tuple[float, float, float]
    nose_radius: float
    glasses: bool
    glasses_radius: float

    @classmethod
    def sample(cls, rng: np.random.Generator) -> "SubjectParams":
        def vec(key):
            lo, hi = PARAM_RANGES[key]
            return tuple(float(x) for x in rng.uniform(lo, hi))

        def scalar(key):
            lo, hi = PARAM_RANGES[key]
            return float(rng.uniform(lo, hi))

        return cls(head_axes=vec("head_axes"), skin=vec("skin"), hair_level=scalar("hair_level"),
                   hair_scale=scalar("hair_scale"), hair_color=vec("hair_color"),
                   nose_radius=scalar("nose_radius"), glasses=bool(rng.random() < 0.5),
                   glasses_radius=scalar("glasses_radius"))

    def vector(self) -> np.ndarray:
        return np.array([*self.head_axes, *self.skin, self.hair_level, self.hair_scale, *self.hair_color,
                         self.nose_radius, float(self.glasses), self.glasses_radius])


def _ellipsoid_sd(p: torch.Tensor, axes: torch.Tensor) -> torch.Tensor:
    k0 = (p / axes).norm(dim=-1)
    k1 = (p / (axes * axes)).norm(dim=-1).clamp(min=1e-9)
    return k0 * (k0 - 1.0) / k1


class AnalyticSubject:
    """Soft union of head, hair cap, nose and optional glasses; view-independent color."""

    bbox = BBOX

    def __init__(self, params: SubjectParams):
        self.params = params

    def _parts(self, p: torch.Tensor):
        prm = self.params
        axes = p.new_tensor(prm.head_axes)
        center = p.new_tensor((0.0, -0.05, 0.0))
        q = p - center
        head = _ellipsoid_sd(q, axes)
        hair_shell = _ellipsoid_sd(q, axes * prm.hair_scale)
        cap = torch.maximum(hair_shell, prm.hair_level * axes[1] - q[..., 1])
        cap = torch.maximum(cap, q[..., 2] - 0.35 * axes[2])
        nose_c = p.new_tensor((0.0, -0.08, 0.92 * prm.head_axes[2])) + center
        nose = (p - nose_c).norm(dim=-1) - prm.nose_radius
        sds = [head, cap, nose]
        colors = [p.new_tensor(prm.skin), p.new_tensor(prm.hair_color), p.new_tensor(prm.skin) * 0.92]
        if prm.glasses:
            r_major, r_minor = prm.glasses_radius, 0.025
            lenses = []
            for side in (-1.0, 1.0):
                c = p.new_tensor((side * 0.2, 0.08, prm.head_axes[2] + 0.06)) + center
                d = p - c
                ring = torch.stack([d[..., :2].norm(dim=-1) - r_major, d[..., 2]], dim=-1).norm(dim=-1)
                lenses.append(ring - r_minor)
            sds.append(torch.minimum(*lenses))
            colors.append(p.new_tensor(GLASSES_COLOR))
        return torch.stack(sds, dim=-1), torch.stack(colors, dim=0)

    def sdf(self, p: torch.Tensor) -> torch.Tensor:
        return self._parts(p)[0].amin(dim=-1)

    def density(self, p: torch.Tensor) -> torch.Tensor:
        return SIGMA_MAX * torch.sigmoid(-self.sdf(p) / EDGE)

    def __call__(self, p: torch.Tensor, dirs: torch.Tensor):
        sds, colors = self._parts(p)
        mix = torch.softmax(-sds / EDGE, dim=-1)
        rgb = mix @ colors
        light = p.new_tensor((0.3, 0.6, 0.75))
        light = light / light.norm()
        shade = 0.78 + 0.22 * (p @ light) / p.norm(dim=-1).clamp(min=1e-6)
        rgb = (rgb * shade.unsqueeze(-1)).clamp(0.0, 1.0)
        sigma = SIGMA_MAX * torch.sigmoid(-sds.amin(dim=-1) / EDGE)
        return rgb, sigma


@dataclass
class SubjectDataset:
    subject_id: int
    seed: int
    params: SubjectParams
    cameras: list[Camera]
    images: torch.Tensor            # (V, H, W, 3)
    holdout_cameras: list[Camera] = field(default_factory=list)
    holdout_images: torch.Tensor | None = None
    frontal_index: int = 0

    @property
    def n_views(self) -> int:
        return len(self.cameras)

    @property
    def frontal(self) -> torch.Tensor:
        return self.images[self.frontal_index]

    def field(self) -> AnalyticSubject:
        return AnalyticSubject(self.params)

    def subset(self, n_views: int) -> "SubjectDataset":
        """The first ``n_views`` views spread evenly around the ring (frontal kept)."""
        idx = np.unique(np.round(np.linspace(0, self.n_views, n_views, endpoint=False)).astype(int))
        return SubjectDataset(self.subject_id, self.seed, self.params, [self.cameras[i] for i in idx],
                              self.images[idx], self.holdout_cameras, self.holdout_images, 0)


GT_RENDER = RenderConfig(n_samples=128, background=(1.0, 1.0, 1.0))


def camera_ring(rng: np.random.Generator, n_views: int, size: int, phase: float = 0.0,
                frontal: bool = True) -> list[Camera]:
    lo, hi = ELEVATION_BAND
    elev = rng.uniform(lo, hi, size=n_views)
    if frontal:
        elev[0] = 0.0
    return [orbit_camera(phase + 2 * math.pi * i / n_views, math.radians(elev[i]), ORBIT_RADIUS, FOV, size)
            for i in range(n_views)]


@torch.no_grad()
def render_analytic(subject: AnalyticSubject, cameras: list[Camera], cfg: RenderConfig = GT_RENDER):
    return torch.stack([render_image(subject, cam, cfg) for cam in cameras])


def synth_subject(seed: int, subject_id: int, n_views: int = 24, image_size: int = 64,
                  n_holdout: int = 4) -> SubjectDataset:
    rng = np.random.default_rng([seed, subject_id])
    params = SubjectParams.sample(rng)
    cams = camera_ring(rng, n_views, image_size)
    held = camera_ring(rng, n_holdout, image_size, phase=math.pi / max(n_views, 1) + 0.3, frontal=False)
    field_ = AnalyticSubject(params)
    return SubjectDataset(subject_id, seed, params, cams, render_analytic(field_, cams), held,
                          render_analytic(field_, held) if held else None)


def synth_dataset(seed: int, n_subjects: int, n_views: int = 24, image_size: int = 64,
                  n_holdout: int = 4) -> list[SubjectDataset]:
    if n_subjects < 1:
        raise ValueError("synth_dataset: need at least one subject")
    return [synth_subject(seed, i, n_views, image_size, n_holdout) for i in range(n_subjects)]


def _cam_dict(cam: Camera) -> dict:
    return asdict(cam)


def save_dataset(directory, subjects: list[SubjectDataset]) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for s in subjects:
        meta = {"subject_id": s.subject_id, "seed": s.seed, "params": asdict(s.params),
                "cameras": [_cam_dict(c) for c in s.cameras],
                "holdout_cameras": [_cam_dict(c) for c in s.holdout_cameras],
                "frontal_index": s.frontal_index}
        stem = directory / f"subject_{s.subject_id:03d}"
        stem.with_suffix(".json").write_text(json.dumps(meta, indent=1, sort_keys=True))
        arrays = {"images": s.images.float().numpy()}
        if s.holdout_images is not None:
            arrays["holdout_images"] = s.holdout_images.float().numpy()
        with open(stem.with_suffix(".npz"), "wb") as fh:
            np.savez(fh, **arrays)
        written += [stem.with_suffix(".json"), stem.with_suffix(".npz")]
    return written


def _cam(d: dict) -> Camera:
    return Camera(position=tuple(d["position"]), target=tuple(d["target"]), up=tuple(d["up"]),
                  fov=d["fov"], width=d["width"], height=d["height"])


def load_dataset(directory) -> list[SubjectDataset]:
    directory = Path(directory)
    metas = sorted(directory.glob("subject_*.json"))
    if not metas:
        raise FileNotFoundError(f"no subjects found in {directory}")
    out = []
    for path in metas:
        meta = json.loads(path.read_text())
        arrays = np.load(path.with_suffix(".npz"))
        prm = meta["params"]
        params = SubjectParams(**{k: tuple(v) if isinstance(v, list) else v for k, v in prm.items()})
        held = arrays["holdout_images"] if "holdout_images" in arrays else None
        out.append(SubjectDataset(meta["subject_id"], meta["seed"], params,
                                  [_cam(c) for c in meta["cameras"]],
                                  torch.from_numpy(arrays["images"]).to(torch.get_default_dtype()),
                                  [_cam(c) for c in meta["holdout_cameras"]],
                                  None if held is None else torch.from_numpy(held).to(torch.get_default_dtype()),
                                  meta["frontal_index"]))
    return out
