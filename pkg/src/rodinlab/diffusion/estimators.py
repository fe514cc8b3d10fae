"""Trainable diffusion models behind an estimator interface.

* :class:`TriPlaneDiffusion` - base noise predictor over rolled-out tri-planes,
  optionally conditioned on a latent from a jointly trained image encoder.
* :class:`TriPlaneUpsampler` - x0-predicting super-resolution model conditioned
  on augmented low-resolution tri-planes.
* :class:`LatentPrior` - small MLP diffusion over the latent vectors.

All three keep an EMA copy of their weights, train with AdamW and can be saved
to / restored from ``.rdck`` checkpoints.
"""
from __future__ import annotations

import contextlib
import logging

import numpy as np
import torch
import torch.nn as nn
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ..checkpoint import load_checkpoint, save_checkpoint
from ..denoiser.encoder import LatentEncoder
from ..denoiser.unet import DenoiserNet, timestep_embedding, upsample_condition
from ..radiance.render import RenderConfig
from ..validation import check_images, check_planes
from .augment import AugmentParams, condition_augment, loss_upsampler
from .core import chain_generator, ema_update, gaussian_skip, latent_dropout, loss_simple, make_schedule, q_sample
from .sampling import sample_base, sample_upsampler

log = logging.getLogger(__name__)


class _Trainable(BaseEstimator):
    """Shared optimizer/EMA/checkpoint plumbing. Subclasses fill ``modules_``."""

    kind = "base"

    def _named_params(self) -> dict:
        return {f"{m}.{n}": p for m, mod in self.modules_.items() for n, p in mod.named_parameters()}

    def _setup_training(self):
        self.optimizer_ = torch.optim.AdamW(list(self._named_params().values()), lr=self.lr, weight_decay=0.0)
        self.ema_ = {k: p.detach().clone() for k, p in self._named_params().items()}
        self.step_ = 0
        self.history_ = []

    def _train_step(self, loss: torch.Tensor):
        if not bool(torch.isfinite(loss)):
            raise FloatingPointError(f"{type(self).__name__}: loss is {float(loss)} at step {self.step_}")
        self.optimizer_.zero_grad(set_to_none=True)
        loss.backward()
        params = list(self._named_params().values())
        if self.grad_clip:
            torch.nn.utils.clip_grad_norm_(params, self.grad_clip)
        self.optimizer_.step()
        ema_update(self.ema_, self._named_params(), self.ema_rate)
        self.step_ += 1
        self.history_.append(float(loss.detach()))

    @contextlib.contextmanager
    def weights(self, use_ema: bool = True):
        """Temporarily swap in the EMA weights."""
        if not use_ema:
            yield
            return
        params = self._named_params()
        backup = {k: p.detach().clone() for k, p in params.items()}
        with torch.no_grad():
            for k, p in params.items():
                p.copy_(self.ema_[k])
        try:
            yield
        finally:
            with torch.no_grad():
                for k, p in params.items():
                    p.copy_(backup[k])

    # checkpoints --------------------------------------------------------
    def _meta(self) -> dict:
        return {}

    def save(self, path) -> None:
        check_is_fitted(self, "modules_")
        state = {f"ema/{k}": v for k, v in self.ema_.items()}
        if getattr(self, "optimizer_", None) is not None:
            names = {id(p): k for k, p in self._named_params().items()}
            for p, st in self.optimizer_.state.items():
                if "exp_avg" in st:
                    state[f"adam.m/{names[id(p)]}"] = st["exp_avg"]
                    state[f"adam.v/{names[id(p)]}"] = st["exp_avg_sq"]
        meta = {"kind": self.kind, "params": _jsonable(self.get_params()), **self._meta()}
        save_checkpoint(path, meta, self._named_params(), state, self.step_)

    @classmethod
    def load(cls, path):
        meta, params, state, step = load_checkpoint(path)
        if meta.get("kind") != cls.kind:
            raise ValueError(f"{path}: checkpoint holds a {meta.get('kind')!r} model, expected {cls.kind!r}")
        est = cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in meta["params"].items()})
        est._restore(meta)
        dtype = torch.get_default_dtype()
        named = est._named_params()
        with torch.no_grad():
            for k, p in named.items():
                p.copy_(params[k].to(dtype))
        est._setup_training()
        est.ema_ = {k: state.get(f"ema/{k}", params[k]).to(dtype).clone() for k in named}
        for k, p in named.items():
            if f"adam.m/{k}" in state:
                est.optimizer_.state[p] = {"step": torch.tensor(float(step)),
                                           "exp_avg": state[f"adam.m/{k}"].to(dtype).clone(),
                                           "exp_avg_sq": state[f"adam.v/{k}"].to(dtype).clone()}
        est.step_ = step
        return est


def _jsonable(params: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in params.items()}


def _fix_seed(seed: int):
    torch.manual_seed(seed)


# ---------------------------------------------------------------------------


class TriPlaneDiffusion(_Trainable):
    """Base model: noise prediction on normalized rolled-out tri-planes.

    ``fit(X, y)`` takes tri-planes ``X`` (list of ``TriPlane`` or rolled-out
    tensor) and frontal images ``y`` ``(N, H, W, 3)``; ``y`` is ignored when
    ``use_latent`` is False.
    """

    kind = "base"

    def __init__(self, T=100, layout="aware", use_latent=True, latent_dim=64, width=32, channel_mult=(1, 2, 2),
                 attention=True, steps=2000, batch_size=8, lr=1e-3, ema_rate=0.995, p_drop=0.2, cfg_scale=1.5,
                 grad_clip=1.0, image_size=64, seed=0):
        self.T = T
        self.layout = layout
        self.use_latent = use_latent
        self.latent_dim = latent_dim
        self.width = width
        self.channel_mult = channel_mult
        self.attention = attention
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.ema_rate = ema_rate
        self.p_drop = p_drop
        self.cfg_scale = cfg_scale
        self.grad_clip = grad_clip
        self.image_size = image_size
        self.seed = seed

    def _build(self, channels: int, resolution: int):
        _fix_seed(self.seed)
        zdim = self.latent_dim if self.use_latent else 0
        self.net_ = DenoiserNet(channels, width=self.width, channel_mult=self.channel_mult, layout=self.layout,
                                latent_dim=zdim, T=self.T, attention=self.attention)
        self.modules_ = {"net": self.net_}
        if self.use_latent:
            self.encoder_ = LatentEncoder(self.latent_dim, self.image_size)
            self.modules_["encoder"] = self.encoder_
        self.schedule_ = make_schedule("linear", self.T)
        self.channels_ = channels
        self.resolution_ = resolution

    def _meta(self):
        meta = {"channels": self.channels_, "resolution": self.resolution_, "scale": self.scale_}
        if self.use_latent:
            meta["encoder_stats"] = self.encoder_.stats()
        return meta

    def _restore(self, meta):
        self._build(meta["channels"], meta["resolution"])
        self.scale_ = meta["scale"]
        if self.use_latent:
            self.encoder_.load_stats(meta["encoder_stats"])

    def _model(self, x, t, z):
        return gaussian_skip(self.schedule_, x, t) + self.net_(x, t, z)

    def _latents(self, images, idx=None):
        if not self.use_latent:
            return None
        imgs = images if idx is None else images[idx]
        return self.encoder_(imgs)

    def fit(self, X, y=None):
        x = check_planes(X)
        images = None
        if self.use_latent:
            if y is None:
                raise ValueError("TriPlaneDiffusion: frontal images are required when use_latent=True")
            images = check_images(y, self.image_size)
            if images.shape[0] != x.shape[0]:
                raise ValueError(f"{x.shape[0]} tri-planes but {images.shape[0]} images")
        self._build(x.shape[1], x.shape[2])
        if self.use_latent:
            self.encoder_.calibrate(images)
        self.scale_ = float(x.std())
        xn = x / self.scale_
        self._setup_training()
        gen = chain_generator(self.seed, 10_000)
        n = xn.shape[0]
        for step in range(self.steps):
            idx = torch.randint(n, (self.batch_size,), generator=gen)
            z = self._latents(images, idx)
            loss = loss_simple(self._model, xn[idx], z, self.schedule_, gen, self.p_drop)
            self._train_step(loss)
            if step % 500 == 0:
                log.debug("base step %d loss %.4f", step, self.history_[-1])
        return self

    @torch.no_grad()
    def encode(self, images, use_ema: bool = True) -> torch.Tensor:
        check_is_fitted(self, "net_")
        if not self.use_latent:
            raise ValueError("model was trained without a latent encoder")
        with self.weights(use_ema):
            return self.encoder_(check_images(images, self.image_size))

    @torch.no_grad()
    def eval_loss(self, X, y=None, n_draws: int = 16, seed: int = 1234, use_ema: bool = False) -> float:
        """Mean noise-prediction error on ``X`` with fixed draws of ``t`` and noise, no latent dropout."""
        check_is_fitted(self, "net_")
        xn = check_planes(X) / self.scale_
        images = check_images(y, self.image_size) if self.use_latent else None
        gen = chain_generator(seed, 0)
        with self.weights(use_ema):
            z = self._latents(images)
            losses = [float(loss_simple(self._model, xn, z, self.schedule_, gen, 0.0)) for _ in range(n_draws)]
        return float(np.mean(losses))

    @torch.no_grad()
    def sample(self, n: int = 1, z=None, cfg_scale: float | None = None, seed: int = 0, use_ema: bool = True,
               noise: bool = True, y_T: torch.Tensor | None = None) -> torch.Tensor:
        """``n`` rolled-out tri-planes in feature units. ``z=None`` samples unconditionally."""
        check_is_fitted(self, "net_")
        scale = self.cfg_scale if cfg_scale is None else cfg_scale
        if z is not None:
            z = torch.as_tensor(z, dtype=torch.get_default_dtype())
            if not self.use_latent:
                raise ValueError("model was trained without latent conditioning")
        r = self.resolution_
        with self.weights(use_ema):
            out = sample_base(self._model, (n, self.channels_, r, 3 * r), z, scale, self.schedule_, seed, noise, y_T)
        return out * self.scale_


class TriPlaneUpsampler(_Trainable):
    """Super-resolution model ``LR -> HR`` predicting clean HR planes.

    ``fit(X)`` takes HR tri-planes; the LR conditions are produced on the fly by
    :func:`condition_augment`. Passing ``decoder`` and ``cameras`` (one camera
    list per tri-plane) with ``w_img > 0`` adds the rendered-patch image loss.
    """

    kind = "sr"

    def __init__(self, T=50, lr_resolution=16, layout="aware", width=32, channel_mult=(1, 2), attention=False,
                 steps=2000, batch_size=8, lr=1e-3, ema_rate=0.995, aug_factors=(2,), aug_blur=(0.0, 0.6),
                 aug_noise=(0.0, 0.05), w_tri=1.0, w_img=0.1, img_samples=2, patch=16, render_samples=24,
                 grad_clip=1.0, seed=0):
        self.T = T
        self.lr_resolution = lr_resolution
        self.layout = layout
        self.width = width
        self.channel_mult = channel_mult
        self.attention = attention
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.ema_rate = ema_rate
        self.aug_factors = aug_factors
        self.aug_blur = aug_blur
        self.aug_noise = aug_noise
        self.w_tri = w_tri
        self.w_img = w_img
        self.img_samples = img_samples
        self.patch = patch
        self.render_samples = render_samples
        self.grad_clip = grad_clip
        self.seed = seed

    @property
    def augment_params(self) -> AugmentParams:
        return AugmentParams(tuple(self.aug_factors), tuple(self.aug_blur), tuple(self.aug_noise))

    def _build(self, channels, resolution):
        if resolution % self.lr_resolution:
            raise ValueError(f"LR resolution {self.lr_resolution} must divide HR resolution {resolution}")
        _fix_seed(self.seed)
        self.net_ = DenoiserNet(channels, in_channels=2 * channels, width=self.width,
                                channel_mult=self.channel_mult, layout=self.layout, latent_dim=0, T=self.T,
                                attention=self.attention)
        self.modules_ = {"net": self.net_}
        self.schedule_ = make_schedule("linear", self.T)
        self.channels_ = channels
        self.resolution_ = resolution

    def _meta(self):
        return {"channels": self.channels_, "resolution": self.resolution_, "scale": self.scale_}

    def _restore(self, meta):
        self._build(meta["channels"], meta["resolution"])
        self.scale_ = meta["scale"]

    def _model(self, x_t, y_lr, t):
        return self.net_(torch.cat([x_t, upsample_condition(y_lr, x_t.shape[-2])], dim=1), t)

    def fit(self, X, y=None, decoder=None, cameras=None):
        x = check_planes(X)
        self._build(x.shape[1], x.shape[2])
        self.scale_ = float(x.std())
        xn = x / self.scale_
        self._setup_training()
        gen = chain_generator(self.seed, 20_000)
        use_img = self.w_img > 0 and decoder is not None and cameras is not None
        n = xn.shape[0]
        params = self.augment_params
        for step in range(self.steps):
            idx = torch.randint(n, (self.batch_size,), generator=gen)
            y_hr = xn[idx]
            y_lr = condition_augment(y_hr, params, self.lr_resolution, gen)
            t = torch.randint(1, self.T + 1, (self.batch_size,), generator=gen)
            eps = torch.randn(y_hr.shape, generator=gen, dtype=y_hr.dtype)
            x0_hat = self._model(q_sample(y_hr, t, eps, self.schedule_), y_lr, t)
            loss = loss_upsampler(x0_hat, y_hr, w_tri=self.w_tri)
            if use_img:
                k = min(self.img_samples, self.batch_size)
                cams = [cameras[int(i)] for i in idx[:k]]
                loss = loss + loss_upsampler(x0_hat[:k], y_hr[:k], decoder, cams, 0.0, self.w_img, self.patch,
                                             gen, RenderConfig(n_samples=self.render_samples), self.scale_)
            self._train_step(loss)
            if step % 500 == 0:
                log.debug("sr step %d loss %.4f", step, self.history_[-1])
        return self

    @torch.no_grad()
    def predict_x0(self, y_t_hr, y_lr, t, use_ema: bool = True) -> torch.Tensor:
        """One network evaluation in feature units (inputs in feature units too)."""
        check_is_fitted(self, "net_")
        with self.weights(use_ema):
            return self._model(y_t_hr / self.scale_, y_lr / self.scale_, t) * self.scale_

    @torch.no_grad()
    def sample(self, y_lr, seed: int = 0, use_ema: bool = True, noise: bool = True) -> torch.Tensor:
        check_is_fitted(self, "net_")
        lr = check_planes(y_lr, self.channels_, self.lr_resolution) / self.scale_
        with self.weights(use_ema):
            out = sample_upsampler(self._model, lr, self.schedule_, seed, self.resolution_, noise)
        return out * self.scale_


class PriorMLP(nn.Module):
    """Noise predictor over latent vectors: ``[z, emb(t)] -> eps``."""

    def __init__(self, dim: int, hidden: int = 256, n_layers: int = 4, t_dim: int = 64):
        super().__init__()
        self.t_dim = t_dim
        layers, width = [], dim + t_dim
        for _ in range(n_layers - 1):
            layers += [nn.Linear(width, hidden), nn.SiLU()]
            width = hidden
        layers.append(nn.Linear(width, dim))
        self.net = nn.Sequential(*layers)

    def forward(self, z, t, cond=None):
        t = torch.as_tensor(t).reshape(-1)
        if t.numel() == 1:
            t = t.expand(z.shape[0])
        return self.net(torch.cat([z, timestep_embedding(t, self.t_dim).to(z.dtype)], dim=-1))


class LatentPrior(_Trainable):
    """Diffusion over per-dimension standardized latent vectors."""

    kind = "latent"

    def __init__(self, T=100, hidden=256, n_layers=4, steps=2000, batch_size=64, lr=1e-3, ema_rate=0.995,
                 grad_clip=1.0, seed=0):
        self.T = T
        self.hidden = hidden
        self.n_layers = n_layers
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.ema_rate = ema_rate
        self.grad_clip = grad_clip
        self.seed = seed

    def _build(self, dim):
        _fix_seed(self.seed)
        self.net_ = PriorMLP(dim, self.hidden, self.n_layers)
        self.modules_ = {"net": self.net_}
        self.schedule_ = make_schedule("linear", self.T)
        self.dim_ = dim

    def _meta(self):
        return {"dim": self.dim_, "mean": self.mean_.tolist(), "std": self.std_.tolist()}

    def _restore(self, meta):
        self._build(meta["dim"])
        self.mean_ = torch.tensor(meta["mean"])
        self.std_ = torch.tensor(meta["std"])

    def _model(self, z, t, cond=None):
        return gaussian_skip(self.schedule_, z, t) + self.net_(z, t)

    def fit(self, X, y=None):
        z = torch.as_tensor(X, dtype=torch.get_default_dtype())
        if z.ndim != 2 or z.shape[0] < 2:
            raise ValueError(f"LatentPrior: expected (N >= 2, D) latents, got {tuple(z.shape)}")
        self._build(z.shape[1])
        self.mean_ = z.mean(dim=0)
        self.std_ = z.std(dim=0).clamp(min=1e-6)
        zn = (z - self.mean_) / self.std_
        self._setup_training()
        gen = chain_generator(self.seed, 30_000)
        for _ in range(self.steps):
            idx = torch.randint(zn.shape[0], (self.batch_size,), generator=gen)
            self._train_step(loss_simple(self._model, zn[idx], None, self.schedule_, gen, 0.0))
        return self

    @torch.no_grad()
    def sample(self, n: int = 1, seed: int = 0, use_ema: bool = True) -> torch.Tensor:
        check_is_fitted(self, "net_")
        with self.weights(use_ema):
            zn = sample_base(self._model, (n, self.dim_), None, 1.0, self.schedule_, seed)
        return zn * self.std_.to(zn.dtype) + self.mean_.to(zn.dtype)


__all__ = ["TriPlaneDiffusion", "TriPlaneUpsampler", "LatentPrior", "PriorMLP", "latent_dropout"]
