"""Toy U-Net denoiser over tri-plane features.

The network keeps tri-planes as per-plane tensors ``(B, P, C, H, W)`` inside;
the external interface is always the rolled-out ``(B, C, H, 3W)`` layout.
Three layouts are supported so the ablation ladder can be run with one class:

* ``"concat"``: the three planes stacked along channels, one ``3C`` image (P=1).
* ``"rollout"``: planes processed side by side with a shared kernel (P=3).
* ``"aware"``: like ``"rollout"`` but every residual block starts with a
  3D-aware convolution.
"""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..numerics import ShapeError
from ..triplane import roll_in, roll_out
from .aware import PlaneConv

LAYOUTS = ("concat", "rollout", "aware")


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding ``[cos(t f_k), sin(t f_k)]`` with geometric frequencies."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.get_default_dtype()) / half)
    args = t.to(freqs.dtype).unsqueeze(-1) * freqs
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def plane_group_norm(x: torch.Tensor, groups: int, eps: float = 1e-5) -> torch.Tensor:
    """Group norm with statistics pooled over all planes of a sample. ``x`` is ``(B, P, C, H, W)``."""
    y = F.group_norm(x.transpose(1, 2), groups, eps=eps)
    return y.transpose(1, 2)


class GroupNorm(nn.Module):
    def __init__(self, channels: int, groups: int = 8, affine: bool = True):
        super().__init__()
        self.groups = math.gcd(groups, channels)
        self.weight = nn.Parameter(torch.ones(channels)) if affine else None
        self.bias = nn.Parameter(torch.zeros(channels)) if affine else None

    def forward(self, x):
        y = plane_group_norm(x, self.groups)
        if self.weight is not None:
            y = y * self.weight.view(1, 1, -1, 1, 1) + self.bias.view(1, 1, -1, 1, 1)
        return y


class AdaGN(nn.Module):
    """Group norm modulated by a conditioning vector: ``GN(x) * (1 + s) + b``.

    ``(s, b)`` come from a zero-initialized linear layer on ``SiLU(cond)``, so a
    fresh block is exactly a plain (non-affine) group norm.
    """

    def __init__(self, channels: int, cond_dim: int, groups: int = 8):
        super().__init__()
        self.norm = GroupNorm(channels, groups, affine=False)
        self.proj = nn.Linear(cond_dim, 2 * channels)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        scale, shift = self.proj(F.silu(cond)).chunk(2, dim=-1)
        return self.norm(x) * (1 + scale[:, None, :, None, None]) + shift[:, None, :, None, None]


def adagn(features: torch.Tensor, z: torch.Tensor, t_emb: torch.Tensor, block: AdaGN) -> torch.Tensor:
    """Functional form: modulate ``features`` with ``concat(t_emb, z)``."""
    cond = torch.cat([t_emb, z], dim=-1) if z is not None and z.shape[-1] else t_emb
    return block(features, cond)


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, cond_dim: int, aware: bool, groups: int = 8):
        super().__init__()
        self.norm1 = GroupNorm(in_ch, groups)
        self.conv1 = PlaneConv(in_ch, out_ch, 3, aware=aware)
        self.norm2 = AdaGN(out_ch, cond_dim, groups)
        self.conv2 = PlaneConv(out_ch, out_ch, 3)
        self.skip = PlaneConv(in_ch, out_ch, 1) if in_ch != out_ch else None

    def forward(self, x, cond):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h, cond)))
        return h + (x if self.skip is None else self.skip(x))


class Attention(nn.Module):
    """Single-head self-attention over every texel of every plane of a sample."""

    def __init__(self, channels: int, groups: int = 8):
        super().__init__()
        self.norm = GroupNorm(channels, groups)
        self.qkv = nn.Linear(channels, 3 * channels)
        self.out = nn.Linear(channels, channels)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x):
        b, p, c, h, w = x.shape
        tokens = self.norm(x).permute(0, 1, 3, 4, 2).reshape(b, p * h * w, c)
        q, k, v = self.qkv(tokens).chunk(3, dim=-1)
        att = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(c), dim=-1)
        y = self.out(att @ v).reshape(b, p, h, w, c).permute(0, 1, 4, 2, 3)
        return x + y


def _down(x):
    b, p, c, h, w = x.shape
    return F.avg_pool2d(x.reshape(b * p, c, h, w), 2).reshape(b, p, c, h // 2, w // 2)


def _up(x):
    b, p, c, h, w = x.shape
    return F.interpolate(x.reshape(b * p, c, h, w), scale_factor=2, mode="nearest").reshape(b, p, c, 2 * h, 2 * w)


class DenoiserNet(nn.Module):
    """U-Net on rolled-out tri-planes.

    Parameters
    ----------
    channels : tri-plane feature channels ``C`` of the output.
    in_channels : channels of the rolled-out input (defaults to ``channels``; the
        upsampler feeds ``2C``: noisy HR plus upsampled LR).
    layout : ``"concat"``, ``"rollout"`` or ``"aware"``.
    latent_dim : size of the conditioning vector ``z``; 0 disables conditioning.
    T : number of diffusion steps; ``t`` must lie in ``[1, T]``.
    """

    def __init__(self, channels: int = 8, in_channels: int | None = None, width: int = 32,
                 channel_mult=(1, 2, 2), layout: str = "aware", latent_dim: int = 64, T: int = 100,
                 groups: int = 8, attention: bool = True):
        super().__init__()
        if layout not in LAYOUTS:
            raise ValueError(f"layout must be one of {LAYOUTS}, got {layout!r}")
        self.channels = channels
        self.in_channels = channels if in_channels is None else in_channels
        self.width = width
        self.channel_mult = tuple(channel_mult)
        self.layout = layout
        self.latent_dim = latent_dim
        self.T = T
        self.groups = groups
        self.attention = attention
        aware = layout == "aware"
        fold = 3 if layout == "concat" else 1
        emb_dim = 4 * width
        self.t_mlp = nn.Sequential(nn.Linear(width, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        cond_dim = emb_dim + latent_dim

        self.inp = PlaneConv(fold * self.in_channels, width, 3, aware=aware)
        widths = [width * m for m in self.channel_mult]
        self.down = nn.ModuleList()
        ch = width
        for wd in widths:
            self.down.append(ResBlock(ch, wd, cond_dim, aware, groups))
            ch = wd
        self.mid1 = ResBlock(ch, ch, cond_dim, aware, groups)
        self.attn = Attention(ch, groups) if attention else None
        self.mid2 = ResBlock(ch, ch, cond_dim, aware, groups)
        self.up = nn.ModuleList()
        for wd in reversed(widths):
            self.up.append(ResBlock(ch + wd, wd, cond_dim, aware, groups))
            ch = wd
        self.out_norm = GroupNorm(ch, groups)
        self.out = PlaneConv(ch, fold * channels, 3)
        nn.init.zeros_(self.out.conv.weight)
        nn.init.zeros_(self.out.conv.bias)

    def config(self) -> dict:
        return {"channels": self.channels, "in_channels": self.in_channels, "width": self.width,
                "channel_mult": list(self.channel_mult), "layout": self.layout,
                "latent_dim": self.latent_dim, "T": self.T, "groups": self.groups,
                "attention": self.attention}

    @classmethod
    def from_config(cls, cfg: dict) -> "DenoiserNet":
        return cls(**{**cfg, "channel_mult": tuple(cfg["channel_mult"])})

    # layout conversion -------------------------------------------------
    def _to_planes(self, rolled):
        planes = roll_in(rolled)                       # (B, 3, C, H, W)
        if self.layout == "concat":
            b, _, c, h, w = planes.shape
            return planes.reshape(b, 1, 3 * c, h, w)
        return planes

    def _from_planes(self, x):
        if self.layout == "concat":
            b, _, c3, h, w = x.shape
            x = x.reshape(b, 3, c3 // 3, h, w)
        return roll_out(x)

    def forward(self, x: torch.Tensor, t, z: torch.Tensor | None = None) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.in_channels or x.shape[-1] != 3 * x.shape[-2]:
            raise ShapeError("DenoiserNet", "input (B, C, H, 3W)", f"C={self.in_channels}", tuple(x.shape))
        levels = len(self.channel_mult) - 1
        if x.shape[-2] % (2 ** levels):
            raise ShapeError("DenoiserNet", "resolution", f"multiple of {2 ** levels}", x.shape[-2])
        b = x.shape[0]
        t = torch.as_tensor(t).reshape(-1)
        if t.numel() == 1:
            t = t.expand(b)
        if bool((t < 1).any()) or bool((t > self.T).any()):
            raise ValueError(f"timestep out of range [1, {self.T}]: {t.tolist()}")
        cond = self.t_mlp(timestep_embedding(t, self.width))
        if self.latent_dim:
            if z is None:
                z = x.new_zeros(b, self.latent_dim)
            if z.ndim == 1:
                z = z.unsqueeze(0).expand(b, -1)
            if z.shape != (b, self.latent_dim):
                raise ShapeError("DenoiserNet", "latent", (b, self.latent_dim), tuple(z.shape))
            cond = torch.cat([cond, z.to(cond.dtype)], dim=-1)

        h = self.inp(self._to_planes(x))
        skips = []
        for i, block in enumerate(self.down):
            h = block(h, cond)
            skips.append(h)
            if i < levels:
                h = _down(h)
        h = self.mid1(h, cond)
        if self.attn is not None:
            h = self.attn(h)
        h = self.mid2(h, cond)
        for i, block in enumerate(self.up):
            h = block(torch.cat([h, skips.pop()], dim=2), cond)
            if i < levels:
                h = _up(h)
        h = self.out(F.silu(self.out_norm(h)))
        return self._from_planes(h)


def denoise_base(net: DenoiserNet, y_t: torch.Tensor, t, z: torch.Tensor | None = None) -> torch.Tensor:
    """Noise prediction for a rolled-out batch; ``z=None`` is the unconditional branch."""
    return net(y_t, t, z)


def upsample_condition(y_lr: torch.Tensor, hr: int) -> torch.Tensor:
    """Bilinearly resize a rolled-out LR batch to ``hr`` per plane."""
    lr = y_lr.shape[-2]
    if hr % lr:
        raise ShapeError("denoise_upsampler", "LR resolution dividing HR", f"divisor of {hr}", lr)
    planes = roll_in(y_lr)
    b, _, c, _, _ = planes.shape
    up = F.interpolate(planes.reshape(b * 3, c, lr, lr), size=(hr, hr), mode="bilinear", align_corners=False)
    return roll_out(up.reshape(b, 3, c, hr, hr))


def denoise_upsampler(net: DenoiserNet, y_t_hr: torch.Tensor, y_lr: torch.Tensor, t) -> torch.Tensor:
    """Clean HR prediction from noisy HR planes and the LR condition."""
    if y_t_hr.shape[0] != y_lr.shape[0] or y_t_hr.shape[1] != y_lr.shape[1]:
        raise ShapeError("denoise_upsampler", "batch/channels", tuple(y_t_hr.shape[:2]), tuple(y_lr.shape[:2]))
    cond = upsample_condition(y_lr, y_t_hr.shape[-2])
    return net(torch.cat([y_t_hr, cond], dim=1), t)
