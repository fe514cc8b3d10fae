from .augment import AugmentParams, condition_augment, gaussian_blur, image_loss, loss_upsampler
from .core import (NoiseSchedule, ancestral_step, cfg_combine, chain_generator, default_betas, ema_update, gaussian_skip,
                   latent_dropout, loss_simple, make_schedule, posterior_mean, posterior_step, q_sample)
from .estimators import LatentPrior, PriorMLP, TriPlaneDiffusion, TriPlaneUpsampler
from .sampling import initial_noise, sample_base, sample_upsampler

__all__ = [
    "AugmentParams", "condition_augment", "gaussian_blur", "image_loss", "loss_upsampler", "NoiseSchedule",
    "ancestral_step", "cfg_combine", "chain_generator", "default_betas", "ema_update", "gaussian_skip", "latent_dropout",
    "loss_simple", "make_schedule", "posterior_mean", "posterior_step", "q_sample", "LatentPrior", "PriorMLP",
    "TriPlaneDiffusion", "TriPlaneUpsampler", "initial_noise", "sample_base", "sample_upsampler",
]
