"""Per-subject tri-plane fitting with a shared radiance decoder.

The first few subjects are fitted jointly with the decoder; the decoder is then
frozen and every remaining subject only optimizes its own planes. During both
phases the planes are randomly pushed through a down/up-sampling round trip so
the decoder learns to read them at any resolution.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .metrics import psnr
from .numerics import resize_bilinear
from .radiance.decoder import RadianceDecoder, TriPlaneField
from .radiance.render import RenderConfig, render_image, render_rays
from .triplane import FourierSpec, TriPlane
from .validation import check_subjects

log = logging.getLogger(__name__)


class FittingDivergence(FloatingPointError):
    """The fitting loss became NaN or infinite."""


@dataclass
class FitConfig:
    iterations: int = 2000
    subject_iterations: int | None = None
    n_shared: int = 2
    resolution: int = 32
    channels: int = 8
    hidden: int = 64
    bands: int = 4
    lr_planes: float = 1e-2
    lr_decoder: float = 1e-3
    lr_final_fraction: float = 0.1
    w_mse: float = 1.0
    w_sparse: float = 5e-6
    w_smooth: float = 5e-5
    w_dist: float = 5e-5
    scale_prob: float = 0.5
    scale_choices: tuple[int, ...] = (8, 16, 24, 32)
    rays_per_step: int = 1024
    n_samples: int = 32
    smooth_probes: int = 4096
    smooth_delta: float = 0.02
    plane_std: float = 0.1
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("FitConfig.iterations must be >= 0")
        for name in ("w_mse", "w_sparse", "w_smooth", "w_dist", "lr_planes", "lr_decoder"):
            if getattr(self, name) < 0:
                raise ValueError(f"FitConfig.{name} must be non-negative")
        if not 0 <= self.scale_prob <= 1:
            raise ValueError("FitConfig.scale_prob must lie in [0, 1]")

    @property
    def render(self) -> RenderConfig:
        return RenderConfig(n_samples=self.n_samples, background=self.background)


# ---------------------------------------------------------------------------
# loss terms


def loss_mse(rendered: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if rendered.shape != target.shape:
        raise ValueError(f"loss_mse: shape mismatch {tuple(rendered.shape)} vs {tuple(target.shape)}")
    return ((rendered - target) ** 2).mean()


def loss_sparse(densities: torch.Tensor) -> torch.Tensor:
    """Mean l1 magnitude of densities."""
    return densities.abs().mean()


def loss_smooth(density_fn, probes: torch.Tensor, delta: float, directions: torch.Tensor,
                bbox=None) -> torch.Tensor:
    """Mean ``|sigma(p) - sigma(p + delta * u)|`` over probes ``p`` and unit offsets ``u``.

    Perturbed probes are clamped into ``bbox`` when one is given.
    """
    moved = probes + delta * directions
    if bbox is not None:
        lo, hi = probes.new_tensor(bbox[:3]), probes.new_tensor(bbox[3:])
        moved = torch.maximum(torch.minimum(moved, hi), lo)
    return (density_fn(probes) - density_fn(moved)).abs().mean()


def loss_dist(weights: torch.Tensor, t: torch.Tensor, deltas: torch.Tensor) -> torch.Tensor:
    """Distortion ``sum_ij w_i w_j |t_i - t_j| + 1/3 sum_i w_i^2 delta_i``, averaged over rays.

    Inputs are ``(..., S)`` with ``t`` sorted along the last axis; the pairwise
    term is evaluated in O(S) with prefix sums.
    """
    wt = weights * t
    w_before = torch.cumsum(weights, dim=-1) - weights
    wt_before = torch.cumsum(wt, dim=-1) - wt
    pairwise = 2.0 * (weights * (t * w_before - wt_before)).sum(dim=-1)
    self_term = (weights ** 2 * deltas).sum(dim=-1) / 3.0
    return (pairwise + self_term).mean()


def random_unit(n: int, generator: torch.Generator) -> torch.Tensor:
    v = torch.randn(n, 3, generator=generator)
    return v / v.norm(dim=-1, keepdim=True).clamp(min=1e-12)


# ---------------------------------------------------------------------------
# fitting loops


class _RayTable:
    """All training rays of one subject, flattened across views."""

    def __init__(self, subject):
        origins, dirs, colors = [], [], []
        for cam, img in zip(subject.cameras, subject.images):
            o, d, _ = cam.rays()
            origins.append(o)
            dirs.append(d)
            colors.append(img.reshape(-1, 3).to(o.dtype))
        self.origins = torch.cat(origins)
        self.dirs = torch.cat(dirs)
        self.colors = torch.cat(colors)

    def __len__(self):
        return self.origins.shape[0]


def _maybe_rescale(planes: torch.Tensor, cfg: FitConfig, generator: torch.Generator) -> torch.Tensor:
    if cfg.scale_prob <= 0 or float(torch.rand((), generator=generator)) >= cfg.scale_prob:
        return planes
    choice = cfg.scale_choices[int(torch.randint(len(cfg.scale_choices), (), generator=generator))]
    if choice == planes.shape[-1]:
        return planes
    return resize_bilinear(resize_bilinear(planes, choice), planes.shape[-1])


def _step_losses(planes_list, decoder, tables, cfg: FitConfig, generator, bbox):
    n_sub = len(planes_list)
    rays_each = max(1, cfg.rays_per_step // n_sub)
    probes_each = max(1, cfg.smooth_probes // n_sub)
    rc = cfg.render
    lo = torch.tensor(bbox[:3])
    hi = torch.tensor(bbox[3:])
    mse_terms, dens, dist_terms, smooth_terms = [], [], [], []
    for planes, table in zip(planes_list, tables):
        tp = TriPlane(_maybe_rescale(planes, cfg, generator), bbox)
        field = TriPlaneField(tp, decoder)
        idx = torch.randint(len(table), (rays_each,), generator=generator)
        offsets = torch.rand(rays_each, rc.n_samples, generator=generator)
        out = render_rays(field, table.origins[idx], table.dirs[idx], rc, offsets=offsets)
        mse_terms.append(((out.color - table.colors[idx]) ** 2).mean())
        dist_terms.append(loss_dist(out.weights, out.t, out.deltas))
        probes = lo + (hi - lo) * torch.rand(probes_each, 3, generator=generator)
        units = random_unit(probes_each, generator)
        dens_fn = lambda p, u=units: decoder(field.features(p), u)[1]
        smooth_terms.append(loss_smooth(dens_fn, probes, cfg.smooth_delta, units, bbox))
        dens += [out.sigma[out.hit].reshape(-1), dens_fn(probes)]
    terms = {
        "mse": torch.stack(mse_terms).mean(),
        "sparse": loss_sparse(torch.cat(dens)),
        "smooth": torch.stack(smooth_terms).mean(),
        "dist": torch.stack(dist_terms).mean(),
    }
    total = (cfg.w_mse * terms["mse"] + cfg.w_sparse * terms["sparse"]
             + cfg.w_smooth * terms["smooth"] + cfg.w_dist * terms["dist"])
    return total, terms


def _cosine(step: int, total: int, final_fraction: float) -> float:
    if total <= 1:
        return 1.0
    return final_fraction + (1 - final_fraction) * 0.5 * (1 + math.cos(math.pi * step / (total - 1)))


def _optimize(planes_list, decoder, tables, cfg: FitConfig, iterations: int, generator,
              bbox, train_decoder: bool) -> list[dict]:
    groups = [{"params": planes_list, "lr": cfg.lr_planes, "weight_decay": 0.0}]
    if train_decoder:
        groups.append({"params": list(decoder.parameters()), "lr": cfg.lr_decoder, "weight_decay": 0.0})
    opt = torch.optim.AdamW(groups)
    base_lrs = [g["lr"] for g in opt.param_groups]
    history: list[dict] = []
    for step in range(iterations):
        scale = _cosine(step, iterations, cfg.lr_final_fraction)
        for g, lr in zip(opt.param_groups, base_lrs):
            g["lr"] = lr * scale
        total, terms = _step_losses(planes_list, decoder, tables, cfg, generator, bbox)
        if not bool(torch.isfinite(total)):
            last = history[-1] if history else None
            raise FittingDivergence(f"fitting diverged at step {step}: loss={float(total.detach())}, "
                                    f"terms={ {k: float(v.detach()) for k, v in terms.items()} }, last finite={last}")
        opt.zero_grad(set_to_none=True)
        total.backward()
        opt.step()
        history.append({"total": float(total.detach()), **{k: float(v.detach()) for k, v in terms.items()}})
        if step % 250 == 0:
            log.debug("fit step %d loss %.5f mse %.5f", step, history[-1]["total"], history[-1]["mse"])
    return history


def _init_planes(cfg: FitConfig, subject_id: int) -> torch.Tensor:
    g = torch.Generator().manual_seed(cfg.seed * 1_000_003 + subject_id)
    return TriPlane.random(cfg.resolution, cfg.channels, cfg.plane_std, g).planes


def make_decoder(cfg: FitConfig) -> RadianceDecoder:
    torch.manual_seed(cfg.seed)
    return RadianceDecoder(cfg.channels, cfg.hidden, FourierSpec(cfg.bands))


def fit_shared_decoder(subjects: Sequence, cfg: FitConfig, bbox=(-1.0, -1.0, -1.0, 1.0, 1.0, 1.0)):
    """Jointly fit a fresh decoder and one tri-plane per subject.

    Returns ``(decoder, triplanes, history)``; the decoder comes back frozen.
    """
    subjects = check_subjects(subjects)
    if len(subjects) < 2:
        raise ValueError("fit_shared_decoder: need at least 2 subjects")
    decoder = make_decoder(cfg)
    planes = [_init_planes(cfg, s.subject_id).requires_grad_(True) for s in subjects]
    tables = [_RayTable(s) for s in subjects]
    generator = torch.Generator().manual_seed(cfg.seed)
    history = _optimize(planes, decoder, tables, cfg, cfg.iterations, generator, bbox, train_decoder=True)
    decoder.requires_grad_(False)
    decoder.eval()
    return decoder, [TriPlane(p.detach().clone(), bbox) for p in planes], history


def fit_subject(subject, decoder: RadianceDecoder, cfg: FitConfig, iterations: int | None = None,
                bbox=(-1.0, -1.0, -1.0, 1.0, 1.0, 1.0)):
    """Fit one subject's planes against a frozen decoder. Returns ``(triplane, history)``."""
    if any(p.requires_grad for p in decoder.parameters()):
        raise ValueError("fit_subject: decoder must be frozen (requires_grad=False)")
    n_iter = cfg.iterations if iterations is None else iterations
    planes = _init_planes(cfg, subject.subject_id).requires_grad_(True)
    if n_iter == 0:
        return TriPlane(planes.detach().clone(), bbox), []
    generator = torch.Generator().manual_seed(cfg.seed * 7919 + subject.subject_id + 1)
    history = _optimize([planes], decoder, [_RayTable(subject)], cfg, n_iter, generator, bbox,
                        train_decoder=False)
    return TriPlane(planes.detach().clone(), bbox), history


@torch.no_grad()
def heldout_psnr(tp: TriPlane, decoder: RadianceDecoder, subject, cfg: FitConfig | RenderConfig,
                 cameras=None, images=None) -> list[float]:
    """PSNR of deterministic renders against the subject's held-out views."""
    rc = cfg.render if isinstance(cfg, FitConfig) else cfg
    cams = subject.holdout_cameras if cameras is None else cameras
    imgs = subject.holdout_images if images is None else images
    field = TriPlaneField(tp, decoder)
    return [psnr(render_image(field, cam, rc), img) for cam, img in zip(cams, imgs)]


def fit_report(triplanes, decoder, subjects, histories, cfg: FitConfig) -> dict:
    """JSON-ready summary: final loss terms, held-out PSNR per view, feature range."""
    report = {"config": asdict(cfg), "subjects": []}
    for tp, s, hist in zip(triplanes, subjects, histories):
        lo, hi = tp.feature_range()
        final = hist[-1] if hist else {}
        entry = {"subject_id": s.subject_id, "final_losses": final,
                 "heldout_psnr": heldout_psnr(tp, decoder, s, cfg), "feature_range": [lo, hi]}
        if final and final.get("total", 0) > 0:
            reg = final["total"] - cfg.w_mse * final["mse"]
            entry["regularizer_fraction"] = reg / final["total"]
        report["subjects"].append(entry)
    return report


# ---------------------------------------------------------------------------
# estimator


class TriPlaneFitter(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``fit`` learns the shared decoder, ``transform`` fits tri-planes.

    ``fit`` uses the first ``n_shared`` subjects for the joint decoder phase;
    ``transform`` reuses those tri-planes and fits every other subject against the
    frozen decoder.
    """

    def __init__(self, iterations=2000, subject_iterations=None, n_shared=2, resolution=32, channels=8,
                 hidden=64, bands=4, lr_planes=1e-2, lr_decoder=1e-3, lr_final_fraction=0.1, w_mse=1.0,
                 w_sparse=5e-6, w_smooth=5e-5, w_dist=5e-5, scale_prob=0.5, scale_choices=(8, 16, 24, 32),
                 rays_per_step=1024, n_samples=32, smooth_probes=4096, smooth_delta=0.02, plane_std=0.1,
                 background=(1.0, 1.0, 1.0), seed=0):
        self.iterations = iterations
        self.subject_iterations = subject_iterations
        self.n_shared = n_shared
        self.resolution = resolution
        self.channels = channels
        self.hidden = hidden
        self.bands = bands
        self.lr_planes = lr_planes
        self.lr_decoder = lr_decoder
        self.lr_final_fraction = lr_final_fraction
        self.w_mse = w_mse
        self.w_sparse = w_sparse
        self.w_smooth = w_smooth
        self.w_dist = w_dist
        self.scale_prob = scale_prob
        self.scale_choices = scale_choices
        self.rays_per_step = rays_per_step
        self.n_samples = n_samples
        self.smooth_probes = smooth_probes
        self.smooth_delta = smooth_delta
        self.plane_std = plane_std
        self.background = background
        self.seed = seed

    @property
    def config(self) -> FitConfig:
        names = {f.name for f in fields(FitConfig)}
        return FitConfig(**{k: v for k, v in self.get_params().items() if k in names})

    def fit(self, X, y=None):
        subjects = check_subjects(X)
        cfg = self.config
        shared = subjects[: cfg.n_shared]
        self.decoder_, planes, hist = fit_shared_decoder(shared, cfg)
        self.triplanes_ = {s.subject_id: tp for s, tp in zip(shared, planes)}
        self.histories_ = {s.subject_id: hist for s in shared}
        return self

    def transform(self, X):
        check_is_fitted(self, "decoder_")
        cfg = self.config
        out = []
        for s in check_subjects(X):
            if s.subject_id not in self.triplanes_:
                tp, hist = fit_subject(s, self.decoder_, cfg, cfg.subject_iterations)
                self.triplanes_[s.subject_id] = tp
                self.histories_[s.subject_id] = hist
            out.append(self.triplanes_[s.subject_id])
        return out

    def report(self, subjects) -> dict:
        check_is_fitted(self, "decoder_")
        subjects = check_subjects(subjects)
        return fit_report([self.triplanes_[s.subject_id] for s in subjects], self.decoder_, subjects,
                          [self.histories_[s.subject_id] for s in subjects], self.config)
