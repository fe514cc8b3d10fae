"""Pipeline stages: each reads upstream artifacts from ``out_dir`` and writes its own.

Layout of ``out_dir``::

    data/subject_XXX.{json,npz}     synth
    planes/subject_XXX.tpln         fit
    models/decoder.rdck             fit
    models/{base,sr,prior}.rdck     train-base / train-sr / train-latent-prior
    samples/, invert/               sample / invert renders and tri-planes
    reports/<stage>.json            one report per stage
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from pathlib import Path

import numpy as np
import torch

from ..checkpoint import load_checkpoint, save_checkpoint
from ..diffusion import LatentPrior, TriPlaneDiffusion, TriPlaneUpsampler
from ..fitting import FitConfig, TriPlaneFitter, fit_subject, heldout_psnr
from ..metrics import psnr, ssim
from ..radiance import (RadianceDecoder, RenderConfig, TriPlaneField, density_grid, extract_mesh, orbit_ring,
                        render_image, write_obj, write_png)
from ..triplane import TriPlane, load_triplane, rescale, roll_in, roll_out, save_triplane
from .config import PipelineConfig
from .subjects import BBOX, load_dataset, save_dataset, synth_dataset

log = logging.getLogger(__name__)

STAGES = ("synth", "fit", "train-base", "train-sr", "train-latent-prior", "sample", "invert", "eval")


class MissingArtifactError(FileNotFoundError):
    """An upstream artifact required by a stage does not exist."""

    def __init__(self, path, stage: str):
        super().__init__(f"stage {stage!r} needs {path}, which does not exist (run the upstream stage first)")
        self.path = Path(path)
        self.stage = stage


def blob_sha1(path) -> str:
    """Git-style content hash: ``sha1(b"blob <size>\\0" + content)``."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(path, stage)
    return path


class Layout:
    def __init__(self, cfg: PipelineConfig):
        root = cfg.out_dir
        self.root = root
        self.data = root / "data"
        self.planes = root / "planes"
        self.models = root / "models"
        self.samples = root / "samples"
        self.invert = root / "invert"
        self.reports = root / "reports"
        self.decoder = self.models / "decoder.rdck"
        self.base = self.models / "base.rdck"
        self.sr = self.models / "sr.rdck"
        self.prior = self.models / "prior.rdck"

    def plane_path(self, subject_id: int) -> Path:
        return self.planes / f"subject_{subject_id:03d}.tpln"


def fit_config(cfg: PipelineConfig) -> FitConfig:
    return FitConfig(iterations=cfg["fit.iterations"], subject_iterations=cfg["fit.subject_iterations"],
                     n_shared=cfg["fit.n_shared"], resolution=cfg["fit.resolution"], channels=cfg["fit.channels"],
                     hidden=cfg["fit.hidden"], bands=cfg["fit.bands"], lr_planes=cfg["fit.lr_planes"],
                     lr_decoder=cfg["fit.lr_decoder"], w_sparse=cfg["fit.w_sparse"], w_smooth=cfg["fit.w_smooth"],
                     w_dist=cfg["fit.w_dist"], scale_prob=cfg["fit.scale_prob"],
                     rays_per_step=cfg["fit.rays_per_step"], n_samples=cfg["fit.n_samples"], seed=cfg["seed"])


def save_decoder(path, decoder: RadianceDecoder) -> None:
    params = {k: v for k, v in decoder.state_dict().items()}
    save_checkpoint(path, {"kind": "decoder", "config": decoder.config()}, params)


def load_decoder(path) -> RadianceDecoder:
    meta, params, _, _ = load_checkpoint(path)
    if meta.get("kind") != "decoder":
        raise ValueError(f"{path}: not a decoder checkpoint")
    dec = RadianceDecoder.from_config(meta["config"])
    dec.load_state_dict({k: v.to(torch.get_default_dtype()) for k, v in params.items()})
    dec.requires_grad_(False)
    dec.eval()
    return dec


def _load_subjects(lay: Layout, stage: str):
    _require(lay.data, stage)
    if not list(lay.data.glob("subject_*.json")):
        raise MissingArtifactError(lay.data / "subject_000.json", stage)
    return load_dataset(lay.data)


def _load_planes(lay: Layout, subjects, stage: str) -> list[TriPlane]:
    return [load_triplane(_require(lay.plane_path(s.subject_id), stage)) for s in subjects]


def _write_report(lay: Layout, stage: str, cfg: PipelineConfig, inputs: list[Path], body: dict) -> dict:
    report = {"stage": stage, "config_hash": cfg.hash,
              "inputs": {str(p.relative_to(lay.root)): blob_sha1(p) for p in sorted(inputs)}, **body}
    lay.reports.mkdir(parents=True, exist_ok=True)
    (lay.reports / f"{stage}.json").write_text(json.dumps(report, indent=1, sort_keys=True, default=_json_default))
    return report


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, torch.Tensor):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _dataset_files(lay: Layout) -> list[Path]:
    return sorted(lay.data.glob("subject_*.*"))


def output_render_config(cfg: PipelineConfig) -> RenderConfig:
    return RenderConfig(n_samples=cfg["sample.render_samples"])


# ---------------------------------------------------------------------------
# analysis helpers


def density_stats(tp: TriPlane, decoder: RadianceDecoder, grid: int = 40) -> dict:
    """Mean density inside vs outside the unit sphere on a regular grid."""
    g = torch.linspace(-1.0, 1.0, grid)
    pts = torch.stack(torch.meshgrid(g, g, g, indexing="ij"), dim=-1).reshape(-1, 3)
    with torch.no_grad():
        sigma = TriPlaneField(tp, decoder).density(pts)
    r = pts.norm(dim=-1)
    inside, outside = float(sigma[r <= 1].mean()), float(sigma[r > 1].mean())
    return {"mean_inside": inside, "mean_outside": outside,
            "outside_ratio": outside / inside if inside > 0 else math.inf}


def render_orbit(tp: TriPlane, decoder: RadianceDecoder, n_views: int, rc: RenderConfig, size: int = 64):
    field = TriPlaneField(tp, decoder)
    with torch.no_grad():
        return torch.stack([render_image(field, cam, rc) for cam in orbit_ring(n_views, size=size)])


def render_views(tp: TriPlane, decoder: RadianceDecoder, cameras, rc: RenderConfig):
    field = TriPlaneField(tp, decoder)
    with torch.no_grad():
        return torch.stack([render_image(field, cam, rc) for cam in cameras])


def generate(base: TriPlaneDiffusion, sr: TriPlaneUpsampler, z, n: int, cfg_scale: float, seed: int,
             use_ema: bool = True, bbox=BBOX) -> list[TriPlane]:
    """Base sample at LR followed by the upsampler; returns HR tri-planes."""
    lr = base.sample(n, z, cfg_scale, seed, use_ema)
    hr = sr.sample(lr, seed + 1, use_ema)
    return [TriPlane(roll_in(x), bbox) for x in hr]


def invert(image, base: TriPlaneDiffusion, sr: TriPlaneUpsampler, decoder: RadianceDecoder, cfg_scale: float,
           seed: int, cameras, rc: RenderConfig, use_ema: bool = True):
    """Frontal portrait -> tri-plane and renders from ``cameras``."""
    z = base.encode(image, use_ema)
    tp = generate(base, sr, z, 1, cfg_scale, seed, use_ema)[0]
    return tp, render_views(tp, decoder, cameras, rc)


def interpolate_latents(base: TriPlaneDiffusion, sr: TriPlaneUpsampler, decoder: RadianceDecoder, z_a, z_b,
                        k: int, seed: int, cfg_scale: float, camera, rc: RenderConfig, use_ema: bool = True):
    """Renders along ``z = (1 - a) z_a + a z_b`` for ``k + 2`` evenly spaced ``a``.

    Every step reuses the same seed, so all chains share their starting noise
    and per-step noise.
    """
    z_a = torch.as_tensor(z_a)
    z_b = torch.as_tensor(z_b)
    images = []
    for a in np.linspace(0.0, 1.0, k + 2):
        z = z_a if a == 0.0 else z_b if a == 1.0 else (1 - a) * z_a + a * z_b
        tp = generate(base, sr, z, 1, cfg_scale, seed, use_ema)[0]
        images.append(render_views(tp, decoder, [camera], rc)[0])
    return torch.stack(images)


def resolution_sweep(subject, decoder: RadianceDecoder, cfg: FitConfig, resolutions=(8, 16, 32),
                     view_counts=(3, 6, 12, 24), iterations: int = 600) -> dict:
    """Held-out PSNR when fitting ``subject`` at several resolutions and view counts.

    Every point starts from the same seed with random rescaling disabled; the
    view sweep uses ``cfg.resolution``.
    """
    def one(sub, res):
        c = FitConfig(**{**cfg.__dict__, "resolution": res, "scale_prob": 0.0})
        tp, _ = fit_subject(sub, decoder, c, iterations)
        return float(np.mean(heldout_psnr(tp, decoder, sub, c)))

    by_res = {int(r): one(subject, int(r)) for r in resolutions}
    by_views = {int(v): one(subject.subset(int(v)), cfg.resolution) for v in view_counts}
    return {"psnr_by_resolution": by_res, "psnr_by_views": by_views}


# ---------------------------------------------------------------------------
# stages


def stage_synth(cfg: PipelineConfig, lay: Layout) -> dict:
    subjects = synth_dataset(cfg["seed"], cfg["data.n_subjects"], cfg["data.n_views"], cfg["data.image_size"],
                             cfg["data.n_holdout"])
    save_dataset(lay.data, subjects)
    return _write_report(lay, "synth", cfg, [], {
        "subjects": [{"subject_id": s.subject_id, "params": s.params.vector().tolist()} for s in subjects],
        "files": {p.name: blob_sha1(p) for p in _dataset_files(lay)}})


def stage_fit(cfg: PipelineConfig, lay: Layout) -> dict:
    subjects = _load_subjects(lay, "fit")
    fcfg = fit_config(cfg)
    fitter = TriPlaneFitter(**{k: v for k, v in fcfg.__dict__.items()})
    fitter.fit(subjects)
    planes = fitter.transform(subjects)
    lay.planes.mkdir(parents=True, exist_ok=True)
    lay.models.mkdir(parents=True, exist_ok=True)
    for s, tp in zip(subjects, planes):
        save_triplane(lay.plane_path(s.subject_id), tp)
    save_decoder(lay.decoder, fitter.decoder_)
    body = fitter.report(subjects)
    body["density"] = [density_stats(tp, fitter.decoder_) for tp in planes]
    return _write_report(lay, "fit", cfg, _dataset_files(lay), body)


def _base_planes(cfg, planes):
    res = cfg["base.resolution"]
    return torch.stack([roll_out(rescale(tp, res) if tp.resolution != res else tp) for tp in planes])


def stage_train_base(cfg: PipelineConfig, lay: Layout) -> dict:
    subjects = _load_subjects(lay, "train-base")
    planes = _load_planes(lay, subjects, "train-base")
    x = _base_planes(cfg, planes)
    images = torch.stack([s.frontal for s in subjects])
    model = TriPlaneDiffusion(T=cfg["base.T"], layout=cfg["base.layout"], use_latent=cfg["base.use_latent"],
                              latent_dim=cfg["base.latent_dim"], width=cfg["base.width"], steps=cfg["base.steps"],
                              batch_size=cfg["base.batch_size"], lr=cfg["base.lr"], ema_rate=cfg["base.ema_rate"],
                              p_drop=cfg["base.p_drop"], cfg_scale=cfg["sample.cfg_scale"],
                              image_size=cfg["data.image_size"], seed=cfg["seed"])
    model.fit(x, images if cfg["base.use_latent"] else None)
    lay.models.mkdir(parents=True, exist_ok=True)
    model.save(lay.base)
    inputs = [lay.plane_path(s.subject_id) for s in subjects] + _dataset_files(lay)
    return _write_report(lay, "train-base", cfg, inputs, {
        "steps": model.step_, "loss_first": model.history_[:10], "loss_last": model.history_[-10:],
        "eval_loss": model.eval_loss(x, images if cfg["base.use_latent"] else None), "scale": model.scale_})


def stage_train_sr(cfg: PipelineConfig, lay: Layout) -> dict:
    subjects = _load_subjects(lay, "train-sr")
    planes = _load_planes(lay, subjects, "train-sr")
    decoder = load_decoder(_require(lay.decoder, "train-sr"))
    x = torch.stack([roll_out(tp) for tp in planes])
    model = TriPlaneUpsampler(T=cfg["sr.T"], lr_resolution=cfg["base.resolution"], layout=cfg["sr.layout"],
                              width=cfg["sr.width"], steps=cfg["sr.steps"], batch_size=cfg["sr.batch_size"],
                              lr=cfg["sr.lr"], ema_rate=cfg["sr.ema_rate"],
                              aug_factors=(cfg["fit.resolution"] // cfg["base.resolution"],),
                              aug_blur=(0.0, cfg["sr.aug_blur_max"]), aug_noise=(0.0, cfg["sr.aug_noise_max"]),
                              w_img=cfg["sr.w_img"], patch=cfg["sr.patch"], seed=cfg["seed"])
    model.fit(x, decoder=decoder, cameras=[s.cameras for s in subjects])
    lay.models.mkdir(parents=True, exist_ok=True)
    model.save(lay.sr)
    inputs = [lay.plane_path(s.subject_id) for s in subjects] + [lay.decoder]
    return _write_report(lay, "train-sr", cfg, inputs, {
        "steps": model.step_, "loss_first": model.history_[:10], "loss_last": model.history_[-10:],
        "scale": model.scale_})


def stage_train_latent_prior(cfg: PipelineConfig, lay: Layout) -> dict:
    subjects = _load_subjects(lay, "train-latent-prior")
    base = TriPlaneDiffusion.load(_require(lay.base, "train-latent-prior"))
    if not base.use_latent:
        raise ValueError("train-latent-prior: the base model has no latent encoder")
    z = base.encode(torch.stack([s.frontal for s in subjects]), cfg["sample.ema"])
    prior = LatentPrior(T=cfg["prior.T"], hidden=cfg["prior.hidden"], n_layers=cfg["prior.layers"],
                        steps=cfg["prior.steps"], seed=cfg["seed"])
    prior.fit(z)
    prior.save(lay.prior)
    return _write_report(lay, "train-latent-prior", cfg, [lay.base] + _dataset_files(lay), {
        "steps": prior.step_, "loss_last": prior.history_[-10:], "latent_mean": z.mean(dim=0).tolist(),
        "latent_std": z.std(dim=0).tolist()})


def _load_generators(lay: Layout, stage: str):
    base = TriPlaneDiffusion.load(_require(lay.base, stage))
    sr = TriPlaneUpsampler.load(_require(lay.sr, stage))
    decoder = load_decoder(_require(lay.decoder, stage))
    return base, sr, decoder


def stage_sample(cfg: PipelineConfig, lay: Layout) -> dict:
    base, sr, decoder = _load_generators(lay, "sample")
    inputs = [lay.base, lay.sr, lay.decoder]
    n, seed, ema = cfg["sample.n"], cfg["seed"], cfg["sample.ema"]
    z = None
    if base.use_latent:
        prior = LatentPrior.load(_require(lay.prior, "sample"))
        inputs.append(lay.prior)
        z = prior.sample(n, seed, ema)
    tps = generate(base, sr, z, n, cfg["sample.cfg_scale"], seed, ema)
    rc = output_render_config(cfg)
    lay.samples.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, tp in enumerate(tps):
        save_triplane(lay.samples / f"sample_{i:02d}.tpln", tp)
        views = render_orbit(tp, decoder, cfg["sample.orbit_views"], rc, cfg["data.image_size"])
        for j, img in enumerate(views):
            write_png(lay.samples / f"sample_{i:02d}_view_{j:02d}.png", img)
        mesh = extract_mesh(density_grid(TriPlaneField(tp, decoder).density, BBOX, 48), 5.0, BBOX)
        write_obj(lay.samples / f"sample_{i:02d}.obj", mesh)
        entries.append({"finite": bool(torch.isfinite(views).all()),
                        "in_gamut": bool(((views >= 0) & (views <= 1)).all()),
                        "image_sha1": hashlib.sha1(views.float().numpy().tobytes()).hexdigest(),
                        "mesh_vertices": int(mesh.vertices.shape[0]),
                        "feature_range": list(tp.feature_range()), **density_stats(tp, decoder)})
    return _write_report(lay, "sample", cfg, inputs, {"samples": entries})


def stage_invert(cfg: PipelineConfig, lay: Layout) -> dict:
    subjects = _load_subjects(lay, "invert")
    base, sr, decoder = _load_generators(lay, "invert")
    if not base.use_latent:
        raise ValueError("invert: the base model has no latent encoder")
    by_id = {s.subject_id: s for s in subjects}
    if cfg["invert.subject"] not in by_id:
        raise ValueError(f"invert: no subject {cfg['invert.subject']} in the dataset")
    subject = by_id[cfg["invert.subject"]]
    rc = output_render_config(cfg)
    lay.invert.mkdir(parents=True, exist_ok=True)
    table = []
    for scale in cfg["invert.cfg_scales"]:
        tp, views = invert(subject.frontal, base, sr, decoder, scale, cfg["seed"], subject.cameras, rc,
                           cfg["sample.ema"])
        scores = [psnr(v, g) for v, g in zip(views, subject.images)]
        table.append({"cfg_scale": scale, "psnr_mean": float(np.mean(scores)), "psnr_per_view": scores,
                      "ssim_mean": float(np.mean([ssim(v, g) for v, g in zip(views, subject.images)]))})
        tag = f"{scale:g}".replace(".", "p")
        save_triplane(lay.invert / f"subject_{subject.subject_id:03d}_cfg{tag}.tpln", tp)
        for j in range(0, len(views), max(1, len(views) // 8)):
            write_png(lay.invert / f"subject_{subject.subject_id:03d}_cfg{tag}_view_{j:02d}.png", views[j])
    inputs = [lay.base, lay.sr, lay.decoder] + _dataset_files(lay)
    return _write_report(lay, "invert", cfg, inputs, {"subject_id": subject.subject_id, "table": table})


def stage_eval(cfg: PipelineConfig, lay: Layout) -> dict:
    subjects = _load_subjects(lay, "eval")
    decoder = load_decoder(_require(lay.decoder, "eval"))
    by_id = {s.subject_id: s for s in subjects}
    subject = by_id[cfg["eval.subject"]]
    sweep = resolution_sweep(subject, decoder, fit_config(cfg), cfg["eval.resolutions"], cfg["eval.view_counts"],
                             cfg["eval.iterations"])
    return _write_report(lay, "eval", cfg, [lay.decoder] + _dataset_files(lay), {
        "subject_id": subject.subject_id, **sweep})


_RUNNERS = {"synth": stage_synth, "fit": stage_fit, "train-base": stage_train_base, "train-sr": stage_train_sr,
            "train-latent-prior": stage_train_latent_prior, "sample": stage_sample, "invert": stage_invert,
            "eval": stage_eval}


def run_stage(stage: str, cfg: PipelineConfig) -> dict:
    """Run one stage; returns its report (also written to ``reports/<stage>.json``)."""
    if stage not in _RUNNERS:
        raise ValueError(f"unknown stage {stage!r}; expected one of {STAGES}")
    torch.manual_seed(cfg["seed"])
    return _RUNNERS[stage](cfg, Layout(cfg))
