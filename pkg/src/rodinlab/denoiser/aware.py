"""Cross-plane aggregation and the 3D-aware convolution.

Every texel of a plane sits on a line through the volume. The line crosses each
of the two other planes along one row or one column; averaging that row/column
and broadcasting it back gives each texel a summary of the features the volume
holds along its line. Convolving the plane together with those two summaries
restores the 3D correspondence that a plain roll-out loses.

Layouts here are channel-first: rolled-out ``(..., C, H, 3W)`` and per-plane
``(..., 3, C, H, W)`` in plane order ``uv, wu, vw``.
"""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..numerics import ShapeError
from ..triplane import PLANE_NAMES, roll_in, roll_out


def _plane_index(target) -> int:
    if isinstance(target, str):
        if target not in PLANE_NAMES:
            raise ValueError(f"unknown plane {target!r}; expected one of {PLANE_NAMES}")
        return PLANE_NAMES.index(target)
    if target not in (0, 1, 2):
        raise ValueError(f"plane index must be 0, 1 or 2, got {target}")
    return int(target)


def _aggregates(planes: torch.Tensor, i: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Line summaries for plane ``i`` of ``(..., 3, C, H, W)`` planes.

    With the projection convention (first coordinate along columns), plane
    ``i + 1`` meets the lines of plane ``i`` along its rows and is indexed by the
    target's column; plane ``i + 2`` meets them along its columns and is indexed
    by the target's row.
    """
    nxt = planes[..., (i + 1) % 3, :, :, :]
    prv = planes[..., (i + 2) % 3, :, :, :]
    h, w = planes.shape[-2:]
    agg1 = nxt.mean(dim=-1).unsqueeze(-2).expand(*nxt.shape[:-2], h, w)
    agg2 = prv.mean(dim=-2).unsqueeze(-1).expand(*prv.shape[:-2], h, w)
    return agg1, agg2


def axis_align_maps(rolled: torch.Tensor, target) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """``(own, agg1, agg2)`` maps of shape ``(..., C, H, W)`` for one target plane.

    ``rolled`` is a rolled-out ``(..., C, H, 3W)`` tensor with square planes.
    For the ``uv`` target, ``agg1`` is the ``wu`` plane averaged over ``w`` (one
    value per ``u``, constant down each column) and ``agg2`` is the ``vw`` plane
    averaged over ``w`` (one value per ``v``, constant along each row).
    """
    if rolled.ndim < 3 or rolled.shape[-1] != 3 * rolled.shape[-2]:
        raise ShapeError("axis_align_maps", "width", "3 * height", tuple(rolled.shape))
    i = _plane_index(target)
    planes = roll_in(rolled)
    agg1, agg2 = _aggregates(planes, i)
    return planes[..., i, :, :, :], agg1, agg2


def aware_stack(planes: torch.Tensor) -> torch.Tensor:
    """``(B, 3, C, H, W)`` -> ``(B, 3, 3C, H, W)``: each plane with its two line summaries."""
    out = []
    for i in range(3):
        agg1, agg2 = _aggregates(planes, i)
        out.append(torch.cat([planes[:, i], agg1, agg2], dim=1))
    return torch.stack(out, dim=1)


def conv3daware(rolled: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None,
                padding: int | None = None) -> torch.Tensor:
    """3D-aware convolution on a rolled-out batch ``(B, C, H, 3W)``.

    ``weight`` is ``(C_out, 3C, k, k)`` (torch layout) and is shared by the three
    planes. Each plane is zero-padded on its own, so nothing leaks across the
    seams of the roll-out. Returns ``(B, C_out, H, 3W)``.
    """
    if rolled.ndim != 4:
        raise ShapeError("conv3daware", "rank", 4, rolled.ndim)
    planes = roll_in(rolled)
    y = _aware_conv_planes(planes, weight, bias, padding)
    return roll_out(y)


def _aware_conv_planes(planes, weight, bias=None, padding=None):
    b, _, c, h, w = planes.shape
    if weight.shape[1] != 3 * c:
        raise ShapeError("conv3daware", "kernel input channels", 3 * c, weight.shape[1])
    pad = weight.shape[-1] // 2 if padding is None else padding
    stacked = aware_stack(planes).reshape(b * 3, 3 * c, h, w)
    y = F.conv2d(stacked, weight, bias, padding=pad)
    return y.reshape(b, 3, *y.shape[1:])


class PlaneConv(nn.Module):
    """Convolution over per-plane tensors ``(B, P, C, H, W)``.

    With ``aware=True`` (requires ``P == 3``) the input is augmented by the line
    summaries of the other planes before the convolution; otherwise each plane is
    convolved on its own with the shared kernel.
    """

    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, aware: bool = False):
        super().__init__()
        self.aware = aware
        self.conv = nn.Conv2d(in_ch * (3 if aware else 1), out_ch, kernel, padding=kernel // 2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, p, c, h, w = x.shape
        if self.aware:
            if p != 3:
                raise ShapeError("PlaneConv", "planes", 3, p)
            return _aware_conv_planes(x, self.conv.weight, self.conv.bias)
        y = self.conv(x.reshape(b * p, c, h, w))
        return y.reshape(b, p, *y.shape[1:])
