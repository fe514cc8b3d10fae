"""Noise schedule, forward corruption, training loss and single reverse steps."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch


@dataclass(frozen=True)
class NoiseSchedule:
    """Discrete schedule indexed by ``t = 1..T``; arrays are stored at index ``t - 1``."""

    betas: torch.Tensor

    @property
    def T(self) -> int:
        return int(self.betas.shape[0])

    @property
    def alphas(self) -> torch.Tensor:
        return 1.0 - self.betas

    @property
    def alphas_bar(self) -> torch.Tensor:
        return torch.cumprod(1.0 - self.betas, dim=0)

    @property
    def sqrt_alphas_bar(self) -> torch.Tensor:
        return self.alphas_bar.sqrt()

    @property
    def sqrt_one_minus_alphas_bar(self) -> torch.Tensor:
        return (1.0 - self.alphas_bar).sqrt()

    def check_t(self, t) -> torch.Tensor:
        t = torch.as_tensor(t)
        if t.is_floating_point() or bool((t < 1).any()) or bool((t > self.T).any()):
            raise ValueError(f"timestep must be an integer in [1, {self.T}], got {t.tolist()}")
        return t.long()

    def gather(self, values: torch.Tensor, t, like: torch.Tensor) -> torch.Tensor:
        """``values[t - 1]`` shaped to broadcast against ``like`` (batch on axis 0)."""
        t = self.check_t(t)
        v = values.to(like.dtype)[t - 1]
        if v.ndim == 0:
            return v
        return v.reshape(-1, *([1] * (like.ndim - 1)))

    def config(self) -> dict:
        return {"T": self.T, "beta_1": float(self.betas[0]), "beta_T": float(self.betas[-1])}


def default_betas(T: int) -> tuple[float, float]:
    """Linear range rescaled so short chains still end near pure noise.

    At ``T = 1000`` this is the usual ``[1e-4, 0.02]``.
    """
    scale = 1000.0 / T
    return 1e-4 * scale, min(0.02 * scale, 0.999)


def make_schedule(kind: str = "linear", T: int = 100, beta_1: float | None = None, beta_T: float | None = None,
                  check_terminal: bool = True) -> NoiseSchedule:
    """Linear-beta schedule. ``check_terminal`` enforces ``alpha_bar_T < 0.01``."""
    if kind != "linear":
        raise ValueError(f"unsupported schedule kind {kind!r}")
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    d1, dT = default_betas(T)
    b1 = d1 if beta_1 is None else beta_1
    bT = dT if beta_T is None else beta_T
    if not (0.0 < b1 <= bT < 1.0):
        raise ValueError(f"need 0 < beta_1 <= beta_T < 1, got beta_1={b1}, beta_T={bT}")
    betas = torch.linspace(b1, bT, T, dtype=torch.float64) if T > 1 else torch.tensor([b1], dtype=torch.float64)
    sched = NoiseSchedule(betas)
    if check_terminal and float(sched.alphas_bar[-1]) >= 0.01:
        raise ValueError(f"schedule too short: alpha_bar_T = {float(sched.alphas_bar[-1]):.4g} >= 0.01")
    return sched


def chain_generator(seed: int, chain: int = 0) -> torch.Generator:
    """Independent RNG stream for chain ``chain`` of run ``seed``."""
    state = np.random.SeedSequence([int(seed), int(chain)]).generate_state(2, dtype=np.uint32)
    return torch.Generator().manual_seed(int(state[0]) << 32 | int(state[1]))


def q_sample(x0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """``sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``."""
    return sched.gather(sched.sqrt_alphas_bar, t, x0) * x0 + sched.gather(sched.sqrt_one_minus_alphas_bar, t, x0) * eps


def latent_dropout(z: torch.Tensor, generator: torch.Generator, p: float = 0.2) -> torch.Tensor:
    """Zero each sample's latent with probability ``p`` (one draw per row)."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1], got {p}")
    single = z.ndim == 1
    zz = z.unsqueeze(0) if single else z
    keep = torch.rand(zz.shape[0], generator=generator) >= p
    out = zz * keep.to(zz.dtype).unsqueeze(-1)
    return out[0] if single else out


def loss_simple(model: Callable, x0: torch.Tensor, z_cond: torch.Tensor | None, sched: NoiseSchedule,
                generator: torch.Generator, p_drop: float = 0.2, reduction: str = "mean") -> torch.Tensor:
    """Noise-prediction loss with uniformly drawn ``t`` and latent dropout.

    ``reduction="mean"`` averages over every element; ``"sum"`` is the batch mean
    of per-sample squared norms.
    """
    b = x0.shape[0]
    t = torch.randint(1, sched.T + 1, (b,), generator=generator)
    eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    z = None if z_cond is None else latent_dropout(z_cond, generator, p_drop)
    pred = model(q_sample(x0, t, eps, sched), t, z)
    sq = (pred - eps) ** 2
    if reduction == "mean":
        return sq.mean()
    if reduction == "sum":
        return sq.reshape(b, -1).sum(dim=1).mean()
    raise ValueError(f"unknown reduction {reduction!r}")


def gaussian_skip(sched: NoiseSchedule, x_t: torch.Tensor, t) -> torch.Tensor:
    """``sqrt(1 - abar_t) x_t``: the exact noise prediction for unit-variance Gaussian data.

    Networks predict the residual on top of it, so at large ``t`` (where the
    answer is almost ``x_t``) they need not relearn the identity.
    """
    return sched.gather(sched.sqrt_one_minus_alphas_bar, t, x_t) * x_t


def cfg_combine(eps_cond: torch.Tensor, eps_uncond: torch.Tensor, scale: float) -> torch.Tensor:
    """``scale * eps_cond + (1 - scale) * eps_uncond``."""
    if scale == 1.0:
        return eps_cond
    if scale == 0.0:
        return eps_uncond
    return scale * eps_cond + (1.0 - scale) * eps_uncond


def ancestral_step(x_t: torch.Tensor, eps_hat: torch.Tensor, t: int, sched: NoiseSchedule,
                   noise: torch.Tensor | None) -> torch.Tensor:
    """``(x_t - beta_t / sqrt(1 - abar_t) eps_hat) / sqrt(1 - beta_t) + sqrt(beta_t) noise``.

    The noise term is dropped at ``t = 1`` and when ``noise`` is None.
    """
    t = int(sched.check_t(t))
    beta = float(sched.betas[t - 1])
    mean = (x_t - beta / float(sched.sqrt_one_minus_alphas_bar[t - 1]) * eps_hat) / np.sqrt(1.0 - beta)
    if t == 1 or noise is None:
        return mean
    return mean + np.sqrt(beta) * noise


def posterior_mean(x_t: torch.Tensor, x0_hat: torch.Tensor, t: int, sched: NoiseSchedule) -> torch.Tensor:
    """Mean of ``q(x_{t-1} | x_t, x_0)`` with ``x_0`` replaced by the prediction."""
    t = int(sched.check_t(t))
    abar = sched.alphas_bar
    abar_t = float(abar[t - 1])
    abar_prev = float(abar[t - 2]) if t > 1 else 1.0
    beta = float(sched.betas[t - 1])
    c0 = np.sqrt(abar_prev) * beta / (1.0 - abar_t)
    ct = np.sqrt(1.0 - beta) * (1.0 - abar_prev) / (1.0 - abar_t)
    return c0 * x0_hat + ct * x_t


def posterior_step(x_t: torch.Tensor, x0_hat: torch.Tensor, t: int, sched: NoiseSchedule,
                   noise: torch.Tensor | None) -> torch.Tensor:
    """x0-parameterized reverse step: posterior mean plus ``sqrt(beta_t) noise`` (none at ``t = 1``)."""
    mean = posterior_mean(x_t, x0_hat, t, sched)
    if int(t) == 1 or noise is None:
        return mean
    return mean + np.sqrt(float(sched.betas[int(t) - 1])) * noise


def ema_update(shadow: dict, weights: dict, rate: float) -> dict:
    """In place ``shadow <- rate * shadow + (1 - rate) * weights``; returns ``shadow``."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"EMA rate must lie in [0, 1], got {rate}")
    with torch.no_grad():
        for name, w in weights.items():
            if rate == 0.0:
                shadow[name].copy_(w)
            elif rate != 1.0:
                shadow[name].mul_(rate).add_(w.detach(), alpha=1.0 - rate)
    return shadow
