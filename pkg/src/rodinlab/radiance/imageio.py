"""Image files: binary PPM (P6) and an equivalent lossless PNG."""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image


def to_bytes(image) -> np.ndarray:
    """``round(255 * clamp(v, 0, 1))`` with halves rounded up, as ``uint8 (H, W, 3)``."""
    arr = image.detach().cpu().numpy() if isinstance(image, torch.Tensor) else np.asarray(image)
    arr = np.clip(arr.astype(np.float64), 0.0, 1.0)
    return np.floor(arr * 255.0 + 0.5).astype(np.uint8)


def write_ppm(path, image) -> None:
    data = to_bytes(image)
    if data.ndim != 3 or data.shape[2] != 3:
        raise ValueError(f"write_ppm: expected (H, W, 3) image, got {data.shape}")
    h, w, _ = data.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + data.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != b"P6" or int(fields[3]) != 255:
        raise ValueError(f"{path}: only P6 with maxval 255 is supported")
    w, h = int(fields[1]), int(fields[2])
    pos += 1
    return np.frombuffer(raw[pos:pos + w * h * 3], dtype=np.uint8).reshape(h, w, 3)


def write_png(path, image) -> None:
    Image.fromarray(to_bytes(image), mode="RGB").save(path, format="PNG")


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))
