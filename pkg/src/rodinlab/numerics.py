"""Dense tensor ops shared by the whole pipeline.

Tensors are ``torch.Tensor``; reverse-mode gradients come from torch autograd.
The spatial ops in this module take channel-last arrays ``(H, W, C)`` (an optional
leading batch axis is accepted). Networks elsewhere work channel-first and call
torch directly; these functions are the reference surface the tests check
against straight-loop oracles.

Boundary checking is explicit: every op that can see bad input takes
``checked=True`` (raise) or ``checked=False`` (clamp / skip the scan).
"""
from __future__ import annotations

import contextlib
from typing import Iterator, Mapping, Sequence

import torch
import torch.nn.functional as F

__all__ = [
    "ShapeError",
    "NonFiniteError",
    "precision",
    "set_precision",
    "check_finite",
    "conv2d",
    "axis_mean",
    "bilinear_taps",
    "bilinear_sample",
    "group_norm",
    "resize_bilinear",
    "backprop",
]

_PRECISIONS = {"float64": torch.float64, "float32": torch.float32}


class ShapeError(ValueError):
    """Raised when an operand has the wrong extent along a named axis."""

    def __init__(self, op: str, axis: str, expected, got):
        self.op, self.axis, self.expected, self.got = op, axis, expected, got
        super().__init__(f"{op}: axis '{axis}' expected {expected}, got {got}")


class NonFiniteError(FloatingPointError):
    pass


def set_precision(name: str) -> None:
    """Select the global floating dtype ("float64" for tests, "float32" for training)."""
    try:
        torch.set_default_dtype(_PRECISIONS[name])
    except KeyError:
        raise ValueError(f"unknown precision {name!r}; use one of {sorted(_PRECISIONS)}") from None


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    old = torch.get_default_dtype()
    set_precision(name)
    try:
        yield
    finally:
        torch.set_default_dtype(old)


def check_finite(x: torch.Tensor, name: str = "tensor") -> torch.Tensor:
    if not bool(torch.isfinite(x).all()):
        bad = int((~torch.isfinite(x)).sum())
        raise NonFiniteError(f"{name}: {bad} non-finite value(s)")
    return x


def _as_batched(x: torch.Tensor, op: str) -> tuple[torch.Tensor, bool]:
    if x.ndim == 3:
        return x.unsqueeze(0), True
    if x.ndim == 4:
        return x, False
    raise ShapeError(op, "rank", "3 (H,W,C) or 4 (N,H,W,C)", x.ndim)


def conv2d(input: torch.Tensor, kernel: torch.Tensor, stride: int = 1, pad: int = 0,
           checked: bool = True) -> torch.Tensor:
    """2D cross-correlation with zero padding.

    ``input`` is ``(H, W, Cin)`` or ``(N, H, W, Cin)``, ``kernel`` is ``(k, k, Cin, Cout)``.
    Output extents follow ``(H + 2*pad - k) // stride + 1``.
    """
    x, squeeze = _as_batched(input, "conv2d")
    if kernel.ndim != 4:
        raise ShapeError("conv2d", "kernel rank", 4, kernel.ndim)
    k = kernel.shape[0]
    if kernel.shape[1] != k:
        raise ShapeError("conv2d", "kernel width", k, kernel.shape[1])
    if k % 2 != 1:
        raise ShapeError("conv2d", "kernel size (odd)", "odd", k)
    if kernel.shape[2] != x.shape[-1]:
        raise ShapeError("conv2d", "input channels", kernel.shape[2], x.shape[-1])
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d: need stride >= 1 and pad >= 0, got {stride}, {pad}")
    for axis, size in (("height", x.shape[1]), ("width", x.shape[2])):
        if size + 2 * pad < k:
            raise ShapeError("conv2d", axis, f">= {k - 2 * pad}", size)
    if checked:
        check_finite(x, "conv2d input")
        check_finite(kernel, "conv2d kernel")
    out = F.conv2d(x.permute(0, 3, 1, 2), kernel.permute(3, 2, 0, 1), stride=stride, padding=pad)
    out = out.permute(0, 2, 3, 1)
    return out[0] if squeeze else out


def axis_mean(input: torch.Tensor, axis: str) -> torch.Tensor:
    """Mean over rows (-> 1 x W x C) or over columns (-> H x 1 x C)."""
    if input.ndim < 3:
        raise ShapeError("axis_mean", "rank", ">= 3", input.ndim)
    if axis == "rows":
        return input.mean(dim=-3, keepdim=True)
    if axis == "cols":
        return input.mean(dim=-2, keepdim=True)
    raise ValueError(f"axis_mean: axis must be 'rows' or 'cols', got {axis!r}")


def bilinear_taps(uv: torch.Tensor, height: int, width: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Flat texel indices and weights of the 4-tap bilinear footprint.

    ``uv[..., 0]`` runs along columns (width), ``uv[..., 1]`` along rows (height).
    Grid nodes sit at pixel centres ``(i + 0.5) / n``; lookups past the outer
    centres clamp to the border texel. Returns ``(idx, w)`` of shape ``(..., 4)``
    with taps ordered (r0c0, r0c1, r1c0, r1c1).
    """
    x = uv[..., 0] * width - 0.5
    y = uv[..., 1] * height - 0.5
    x0f = torch.floor(x)
    y0f = torch.floor(y)
    fx = x - x0f
    fy = y - y0f
    x0 = x0f.long()
    y0 = y0f.long()
    c0 = x0.clamp(0, width - 1)
    c1 = (x0 + 1).clamp(0, width - 1)
    r0 = y0.clamp(0, height - 1)
    r1 = (y0 + 1).clamp(0, height - 1)
    idx = torch.stack([r0 * width + c0, r0 * width + c1, r1 * width + c0, r1 * width + c1], dim=-1)
    w = torch.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], dim=-1)
    return idx, w


def bilinear_sample(plane: torch.Tensor, uv: torch.Tensor, checked: bool = True) -> torch.Tensor:
    """Sample a channel-last plane ``(H, W, C)`` at normalized coordinates ``uv (..., 2)``.

    With ``checked`` an out-of-square coordinate raises; otherwise it is clamped.
    """
    if plane.ndim != 3:
        raise ShapeError("bilinear_sample", "plane rank", 3, plane.ndim)
    if uv.shape[-1] != 2:
        raise ShapeError("bilinear_sample", "uv last axis", 2, uv.shape[-1])
    if checked:
        check_finite(uv, "bilinear_sample uv")
        if bool(((uv < 0) | (uv > 1)).any()):
            raise ValueError("bilinear_sample: uv outside the unit square")
    else:
        uv = uv.clamp(0.0, 1.0)
    h, w, c = plane.shape
    idx, wts = bilinear_taps(uv, h, w)
    flat = plane.reshape(h * w, c)
    taps = flat[idx.reshape(-1)].reshape(*idx.shape, c)
    return (wts.unsqueeze(-1) * taps).sum(dim=-2)


def group_norm(input: torch.Tensor, groups: int, eps: float = 1e-5) -> torch.Tensor:
    """Group normalization of a channel-last ``(H, W, C)`` or ``(N, H, W, C)`` tensor (no affine)."""
    x, squeeze = _as_batched(input, "group_norm")
    c = x.shape[-1]
    if groups < 1 or c % groups:
        raise ShapeError("group_norm", "channels (divisible by groups)", f"multiple of {groups}", c)
    out = F.group_norm(x.permute(0, 3, 1, 2), groups, eps=eps).permute(0, 2, 3, 1)
    return out[0] if squeeze else out


def resize_bilinear(planes: torch.Tensor, size: int) -> torch.Tensor:
    """Resize channel-first maps ``(..., C, H, W)`` to ``size x size``.

    Uses the same pixel-centre convention as :func:`bilinear_taps`; a no-op resize
    returns an exact copy.
    """
    if size < 1:
        raise ValueError(f"resize size must be positive, got {size}")
    *lead, c, h, w = planes.shape
    if h == size and w == size:
        return planes.clone()
    flat = planes.reshape(-1, c, h, w)
    out = F.interpolate(flat, size=(size, size), mode="bilinear", align_corners=False)
    return out.reshape(*lead, c, size, size)


def backprop(loss: torch.Tensor, params: Mapping[str, torch.Tensor] | Sequence[torch.Tensor]):
    """Reverse-accumulate ``d loss / d param`` for every parameter.

    Parameters the loss does not depend on get zero gradients. Returns a dict when
    ``params`` is a mapping, otherwise a list in the same order.
    """
    if loss.numel() != 1:
        raise ValueError(f"backprop: loss must be scalar, got shape {tuple(loss.shape)}")
    names = list(params.keys()) if isinstance(params, Mapping) else None
    tensors = list(params.values()) if names is not None else list(params)
    if loss.requires_grad:
        grads = torch.autograd.grad(loss.reshape(()), tensors, allow_unused=True)
    else:
        grads = [None] * len(tensors)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(tensors, grads)]
    return dict(zip(names, grads)) if names is not None else grads
