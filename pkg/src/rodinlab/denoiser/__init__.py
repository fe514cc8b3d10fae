from .aware import PlaneConv, aware_stack, axis_align_maps, conv3daware
from .encoder import LatentEncoder, encode_latent
from .unet import (LAYOUTS, AdaGN, Attention, DenoiserNet, ResBlock, adagn, denoise_base, denoise_upsampler,
                   plane_group_norm, timestep_embedding, upsample_condition)

__all__ = [
    "PlaneConv", "aware_stack", "axis_align_maps", "conv3daware", "LatentEncoder", "encode_latent",
    "LAYOUTS", "AdaGN", "Attention", "DenoiserNet", "ResBlock", "adagn", "denoise_base",
    "denoise_upsampler", "plane_group_norm", "timestep_embedding", "upsample_condition",
]
