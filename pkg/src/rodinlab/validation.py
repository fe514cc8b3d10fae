"""Input checks shared by the estimators."""
from __future__ import annotations

from typing import Sequence

import torch

from .triplane import TriPlane, roll_out


def check_subjects(subjects) -> list:
    """A non-empty list of subject datasets with matching image shapes."""
    if subjects is None:
        raise ValueError("expected a sequence of subjects, got None")
    subjects = list(subjects)
    if not subjects:
        raise ValueError("expected at least one subject")
    for s in subjects:
        for attr in ("subject_id", "cameras", "images"):
            if not hasattr(s, attr):
                raise TypeError(f"subject {s!r} lacks attribute {attr!r}")
        if s.images.ndim != 4 or s.images.shape[-1] != 3:
            raise ValueError(f"subject {s.subject_id}: images must be (V, H, W, 3), got {tuple(s.images.shape)}")
        if len(s.cameras) != s.images.shape[0]:
            raise ValueError(f"subject {s.subject_id}: {len(s.cameras)} cameras for {s.images.shape[0]} images")
    ids = [s.subject_id for s in subjects]
    if len(set(ids)) != len(ids):
        raise ValueError("subject ids must be unique")
    return subjects


def check_planes(planes, channels: int | None = None, resolution: int | None = None) -> torch.Tensor:
    """Stack tri-planes into a rolled-out batch ``(B, C, R, 3R)``.

    Accepts a list of ``TriPlane``, a ``(B, 3, C, R, R)`` tensor or an already
    rolled-out ``(B, C, R, 3R)`` tensor.
    """
    if isinstance(planes, TriPlane):
        planes = [planes]
    if isinstance(planes, Sequence) and not isinstance(planes, torch.Tensor):
        if not planes:
            raise ValueError("expected at least one tri-plane")
        x = torch.stack([roll_out(tp) for tp in planes])
    elif isinstance(planes, torch.Tensor) and planes.ndim == 5:
        x = roll_out(planes)
    elif isinstance(planes, torch.Tensor) and planes.ndim == 4:
        x = planes
    else:
        raise TypeError(f"cannot interpret {type(planes).__name__} as a tri-plane batch")
    if x.shape[-1] != 3 * x.shape[-2]:
        raise ValueError(f"rolled-out planes must have width 3 * height, got {tuple(x.shape)}")
    if channels is not None and x.shape[1] != channels:
        raise ValueError(f"expected {channels} channels, got {x.shape[1]}")
    if resolution is not None and x.shape[2] != resolution:
        raise ValueError(f"expected resolution {resolution}, got {x.shape[2]}")
    if not bool(torch.isfinite(x).all()):
        raise ValueError("tri-plane batch contains NaN or inf")
    return x.to(torch.get_default_dtype())


def check_images(images, size: int | None = None) -> torch.Tensor:
    """Images as ``(B, H, W, 3)`` in the default dtype."""
    x = torch.as_tensor(images)
    if x.ndim == 3:
        x = x.unsqueeze(0)
    if x.ndim != 4 or x.shape[-1] != 3:
        raise ValueError(f"expected (B, H, W, 3) images, got {tuple(x.shape)}")
    if size is not None and (x.shape[1] != size or x.shape[2] != size):
        raise ValueError(f"expected {size}x{size} images, got {x.shape[1]}x{x.shape[2]}")
    return x.to(torch.get_default_dtype())
