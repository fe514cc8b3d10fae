"""Reverse-chain samplers for the base model and the upsampler."""
from __future__ import annotations

from typing import Callable

import torch

from .core import NoiseSchedule, ancestral_step, cfg_combine, chain_generator, posterior_step


def _chain_noise(gens, shape, dtype):
    return torch.stack([torch.randn(shape, generator=g, dtype=dtype) for g in gens])


def initial_noise(n: int, shape, seed: int, dtype=None) -> tuple[torch.Tensor, list[torch.Generator]]:
    """``y_T`` for ``n`` chains plus the per-chain generators that continue the streams."""
    dtype = dtype or torch.get_default_dtype()
    gens = [chain_generator(seed, i) for i in range(n)]
    return _chain_noise(gens, tuple(shape), dtype), gens


@torch.no_grad()
def sample_base(model: Callable, shape, z: torch.Tensor | None, scale: float, sched: NoiseSchedule, seed: int,
                noise: bool = True, y_T: torch.Tensor | None = None) -> torch.Tensor:
    """Ancestral sampling with classifier-free guidance.

    ``shape`` is ``(B, C, H, 3W)``. ``model(x, t, z)`` predicts noise and is called
    with ``z=None`` for the unconditional branch; at ``scale == 1`` that branch is
    never evaluated. ``y_T`` overrides the starting noise (shared-noise sampling).
    """
    n = shape[0]
    start, gens = initial_noise(n, shape[1:], seed)
    x = start if y_T is None else y_T.clone()
    if z is not None and z.ndim == 1:
        z = z.unsqueeze(0).expand(n, -1)
    for t in range(sched.T, 0, -1):
        if z is None:
            eps = model(x, t, None)
        elif scale == 1.0:
            eps = model(x, t, z)
        else:
            eps = cfg_combine(model(x, t, z), model(x, t, None), scale)
        step_noise = _chain_noise(gens, x.shape[1:], x.dtype) if noise and t > 1 else None
        x = ancestral_step(x, eps, t, sched, step_noise)
    return x


@torch.no_grad()
def sample_upsampler(model: Callable, y_lr: torch.Tensor, sched: NoiseSchedule, seed: int, hr: int,
                     noise: bool = True) -> torch.Tensor:
    """x0-parameterized chain: ``model(x_t_hr, y_lr, t)`` returns the clean HR prediction."""
    if y_lr.ndim != 4 or y_lr.shape[-1] != 3 * y_lr.shape[-2]:
        raise ValueError(f"sample_upsampler: expected rolled-out LR (B, C, h, 3h), got {tuple(y_lr.shape)}")
    if hr % y_lr.shape[-2]:
        raise ValueError(f"sample_upsampler: LR resolution {y_lr.shape[-2]} does not divide {hr}")
    n, c = y_lr.shape[:2]
    x, gens = initial_noise(n, (c, hr, 3 * hr), seed, y_lr.dtype)
    for t in range(sched.T, 0, -1):
        x0_hat = model(x, y_lr, t)
        if x0_hat.shape != x.shape:
            raise ValueError(f"sample_upsampler: model returned {tuple(x0_hat.shape)}, expected {tuple(x.shape)}")
        step_noise = _chain_noise(gens, x.shape[1:], x.dtype) if noise and t > 1 else None
        x = posterior_step(x, x0_hat, t, sched, step_noise)
    return x
