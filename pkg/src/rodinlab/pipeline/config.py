"""Flat ``key = value`` pipeline configuration.

Every key is declared in :data:`KEYS` with a type, a default and a short
description; unknown keys and unparsable values raise :class:`ConfigError`.
Lists are comma separated. Lines starting with ``#`` are comments.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Key:
    type: str          # int | float | bool | str | ints | floats | strs
    default: object
    doc: str


KEYS: dict[str, Key] = {
    "version": Key("int", CONFIG_VERSION, "config format version"),
    "seed": Key("int", 0, "global seed"),
    "out_dir": Key("str", "run", "output directory (relative paths resolve against the config file)"),
    # dataset
    "data.n_subjects": Key("int", 8, "number of procedural subjects"),
    "data.n_views": Key("int", 24, "training views per subject"),
    "data.n_holdout": Key("int", 4, "held-out views per subject"),
    "data.image_size": Key("int", 64, "image width and height"),
    # fitting
    "fit.iterations": Key("int", 2000, "steps of the joint decoder phase"),
    "fit.subject_iterations": Key("int", 2000, "steps per subject against the frozen decoder"),
    "fit.n_shared": Key("int", 2, "subjects fitted jointly with the decoder"),
    "fit.resolution": Key("int", 32, "tri-plane resolution"),
    "fit.channels": Key("int", 8, "tri-plane channels"),
    "fit.hidden": Key("int", 64, "decoder hidden width"),
    "fit.bands": Key("int", 4, "Fourier bands of the decoder input"),
    "fit.lr_planes": Key("float", 1e-2, "plane learning rate"),
    "fit.lr_decoder": Key("float", 1e-3, "decoder learning rate"),
    "fit.w_sparse": Key("float", 5e-6, "density l1 weight"),
    "fit.w_smooth": Key("float", 5e-5, "density smoothness weight"),
    "fit.w_dist": Key("float", 5e-5, "distortion weight"),
    "fit.scale_prob": Key("float", 0.5, "probability of random plane rescaling per step"),
    "fit.rays_per_step": Key("int", 1024, "rays per optimization step"),
    "fit.n_samples": Key("int", 32, "samples per ray"),
    # base diffusion
    "base.resolution": Key("int", 16, "tri-plane resolution modelled by the base diffusion"),
    "base.T": Key("int", 100, "diffusion steps"),
    "base.layout": Key("str", "aware", "concat | rollout | aware"),
    "base.use_latent": Key("bool", True, "condition on the image latent"),
    "base.latent_dim": Key("int", 64, "latent size"),
    "base.width": Key("int", 32, "U-Net base width"),
    "base.steps": Key("int", 2000, "training steps"),
    "base.batch_size": Key("int", 8, "training batch"),
    "base.lr": Key("float", 1e-3, "AdamW learning rate"),
    "base.ema_rate": Key("float", 0.995, "EMA rate"),
    "base.p_drop": Key("float", 0.2, "latent dropout probability"),
    # upsampler
    "sr.T": Key("int", 50, "diffusion steps"),
    "sr.layout": Key("str", "aware", "concat | rollout | aware"),
    "sr.width": Key("int", 16, "U-Net base width"),
    "sr.steps": Key("int", 2000, "training steps"),
    "sr.batch_size": Key("int", 4, "training batch"),
    "sr.lr": Key("float", 1e-3, "AdamW learning rate"),
    "sr.ema_rate": Key("float", 0.995, "EMA rate"),
    "sr.aug_blur_max": Key("float", 0.6, "largest blur sigma of the LR condition (texels)"),
    "sr.aug_noise_max": Key("float", 0.05, "largest noise std of the LR condition (normalized units)"),
    "sr.w_img": Key("float", 0.1, "weight of the rendered-patch image loss"),
    "sr.patch": Key("int", 16, "rendered patch size"),
    # latent prior
    "prior.T": Key("int", 100, "diffusion steps"),
    "prior.steps": Key("int", 2000, "training steps"),
    "prior.hidden": Key("int", 256, "MLP width"),
    "prior.layers": Key("int", 4, "MLP layers"),
    # sampling / inversion / evaluation
    "sample.n": Key("int", 2, "unconditional samples"),
    "sample.cfg_scale": Key("float", 1.5, "guidance scale"),
    "sample.ema": Key("bool", True, "sample with EMA weights"),
    "sample.orbit_views": Key("int", 8, "orbit renders per sample"),
    "sample.render_samples": Key("int", 48, "ray samples for output renders"),
    "invert.subject": Key("int", 0, "training subject whose frontal view is inverted"),
    "invert.cfg_scales": Key("floats", (1.0, 1.5, 3.0), "guidance sweep for the inversion report"),
    "eval.subject": Key("int", 0, "subject used by the resolution/view sweep"),
    "eval.resolutions": Key("ints", (8, 16, 32), "tri-plane resolutions of the sweep"),
    "eval.view_counts": Key("ints", (3, 6, 12, 24), "training view counts of the sweep"),
    "eval.iterations": Key("int", 600, "fit steps per sweep point"),
}


def _parse(key: str, raw: str):
    kind = KEYS[key].type
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "str":
            return raw
        items = [s.strip() for s in raw.split(",") if s.strip()]
        if kind == "ints":
            return tuple(int(s) for s in items)
        if kind == "floats":
            return tuple(float(s) for s in items)
        return tuple(items)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {kind}") from None


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


class PipelineConfig:
    """Typed view over the flat key/value configuration."""

    def __init__(self, values: dict | None = None, base_dir: Path | None = None):
        self.values = {k: spec.default for k, spec in KEYS.items()}
        self.base_dir = Path(base_dir) if base_dir is not None else Path.cwd()
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key: str, value) -> None:
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        self.values[key] = _parse(key, value) if isinstance(value, str) else value
        if key == "version" and self.values[key] != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {self.values[key]} (expected {CONFIG_VERSION})")

    def __getitem__(self, key: str):
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        return self.values[key]

    @classmethod
    def from_text(cls, text: str, base_dir=None, overrides=()) -> "PipelineConfig":
        cfg = cls(base_dir=base_dir)
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
            key, value = line.split("=", 1)
            cfg.set(key.strip(), value)
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            key, value = item.split("=", 1)
            cfg.set(key.strip(), value)
        return cfg

    @classmethod
    def from_file(cls, path, overrides=()) -> "PipelineConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        return cls.from_text(text, path.parent, overrides)

    def to_text(self) -> str:
        lines = [f"{k} = {_format(self.values[k])}" for k in KEYS]
        return "\n".join(lines) + "\n"

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    @property
    def out_dir(self) -> Path:
        p = Path(self.values["out_dir"])
        return p if p.is_absolute() else self.base_dir / p


def documented_defaults() -> str:
    """A commented config file listing every key with its default."""
    out = [f"# rodinlab pipeline configuration (version {CONFIG_VERSION})"]
    for k, spec in KEYS.items():
        out.append(f"# {spec.doc}")
        out.append(f"{k} = {_format(spec.default)}")
    return "\n".join(out) + "\n"
