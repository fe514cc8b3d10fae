from .config import KEYS, ConfigError, PipelineConfig, documented_defaults
from .stages import (STAGES, MissingArtifactError, blob_sha1, density_stats, generate, interpolate_latents, invert,
                     load_decoder, render_orbit, resolution_sweep, run_stage, save_decoder)
from .subjects import (AnalyticSubject, SubjectDataset, SubjectParams, load_dataset, save_dataset, synth_dataset,
                       synth_subject)

__all__ = [
    "KEYS", "ConfigError", "PipelineConfig", "documented_defaults", "STAGES", "MissingArtifactError", "blob_sha1",
    "density_stats", "generate", "interpolate_latents", "invert", "load_decoder", "render_orbit",
    "resolution_sweep", "run_stage", "save_decoder", "AnalyticSubject", "SubjectDataset", "SubjectParams",
    "load_dataset", "save_dataset", "synth_dataset", "synth_subject",
]
