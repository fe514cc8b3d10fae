"""Binary checkpoint file (``.rdck``).

Layout, little-endian::

    b"RDCK" | u16 version | u32 meta_len | meta (UTF-8 JSON)
    u32 n_params | n_params x tensor record
    u32 n_state  | n_state  x tensor record
    u64 step

    tensor record = u16 name_len | name (UTF-8) | u32 ndim | ndim x u32 shape | f32 data

The parameter table holds model weights; the state table holds training state
(optimizer moments, EMA shadow) under prefixed names.
"""
from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"RDCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _write_table(buf, table: dict) -> None:
    buf.write(struct.pack("<I", len(table)))
    for name, tensor in table.items():
        raw = name.encode("utf-8")
        arr = np.array(tensor.detach().cpu().numpy(), dtype="<f4", order="C")   # keeps 0-d shapes
        buf.write(struct.pack("<H", len(raw)) + raw)
        buf.write(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())


def _read(buf, fmt: str):
    size = struct.calcsize(fmt)
    data = buf.read(size)
    if len(data) != size:
        raise CheckpointError("truncated checkpoint")
    return struct.unpack(fmt, data)


def _read_table(buf) -> dict:
    (n,) = _read(buf, "<I")
    table = {}
    for _ in range(n):
        (name_len,) = _read(buf, "<H")
        name = buf.read(name_len).decode("utf-8")
        (ndim,) = _read(buf, "<I")
        shape = _read(buf, f"<{ndim}I") if ndim else ()
        count = int(np.prod(shape)) if ndim else 1
        data = buf.read(4 * count)
        if len(data) != 4 * count:
            raise CheckpointError(f"truncated data for tensor {name!r}")
        table[name] = torch.from_numpy(np.frombuffer(data, dtype="<f4").reshape(shape).copy())
    return table


def save_checkpoint(path, meta: dict, params: dict, state: dict | None = None, step: int = 0) -> None:
    buf = io.BytesIO()
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf.write(MAGIC + struct.pack("<HI", VERSION, len(blob)) + blob)
    _write_table(buf, params)
    _write_table(buf, state or {})
    buf.write(struct.pack("<Q", int(step)))
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple[dict, dict, dict, int]:
    """Returns ``(meta, params, state, step)``; tensors come back as float32."""
    buf = io.BytesIO(Path(path).read_bytes())
    if buf.read(4) != MAGIC:
        raise CheckpointError(f"{path}: not an RDCK checkpoint")
    version, meta_len = _read(buf, "<HI")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    meta = json.loads(buf.read(meta_len).decode("utf-8"))
    params = _read_table(buf)
    state = _read_table(buf)
    (step,) = _read(buf, "<Q")
    return meta, params, state, step
