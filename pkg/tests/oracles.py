"""Independent reference implementations used by the tests.

Everything here is written with explicit Python loops or textbook formulas and
shares no code with the package beyond plain tensors.
"""
import math

import numpy as np
import torch


def conv2d_loop(x, k, stride=1, pad=0):
    """x (H, W, Cin), k (kh, kw, Cin, Cout) -> zero-padded cross-correlation."""
    x = np.asarray(x, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    h, w, cin = x.shape
    kh, kw, _, cout = k.shape
    xp = np.zeros((h + 2 * pad, w + 2 * pad, cin))
    xp[pad:pad + h, pad:pad + w] = x
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((oh, ow, cout))
    for i in range(oh):
        for j in range(ow):
            for o in range(cout):
                acc = 0.0
                for a in range(kh):
                    for b in range(kw):
                        for c in range(cin):
                            acc += xp[i * stride + a, j * stride + b, c] * k[a, b, c, o]
                out[i, j, o] = acc
    return out


def bilinear_loop(plane, u, v):
    """plane (H, W, C); u along columns, v along rows, pixel-centre nodes, border clamp."""
    plane = np.asarray(plane, dtype=np.float64)
    h, w, _ = plane.shape
    x = u * w - 0.5
    y = v * h - 0.5
    x0, y0 = math.floor(x), math.floor(y)
    fx, fy = x - x0, y - y0

    def px(r, c):
        return plane[min(max(r, 0), h - 1), min(max(c, 0), w - 1)]

    return ((1 - fx) * (1 - fy) * px(y0, x0) + fx * (1 - fy) * px(y0, x0 + 1)
            + (1 - fx) * fy * px(y0 + 1, x0) + fx * fy * px(y0 + 1, x0 + 1))


def group_norm_loop(x, groups, eps=1e-5):
    x = np.asarray(x, dtype=np.float64)
    h, w, c = x.shape
    out = np.empty_like(x)
    per = c // groups
    for g in range(groups):
        block = x[:, :, g * per:(g + 1) * per]
        mu = block.sum() / block.size
        var = ((block - mu) ** 2).sum() / block.size
        out[:, :, g * per:(g + 1) * per] = (block - mu) / math.sqrt(var + eps)
    return out


def distortion_loop(w, t, d):
    w, t, d = (np.asarray(a, dtype=np.float64) for a in (w, t, d))
    total = 0.0
    for i in range(len(w)):
        for j in range(len(w)):
            total += w[i] * w[j] * abs(t[i] - t[j])
    for i in range(len(w)):
        total += w[i] ** 2 * d[i] / 3.0
    return total


# -- 3D semantics of the aware convolution ------------------------------------
#
# A tri-plane of resolution R is read as R^3 voxel coordinates (iu, iv, iw). The
# uv plane stores texel [row=iv, col=iu], wu stores [row=iu, col=iw], vw stores
# [row=iw, col=iv]. For a target texel, the 3D line through it varies the
# missing coordinate; the other planes are averaged along that line.

def _plane_value(planes, name, iu, iv, iw):
    if name == "uv":
        return planes[0][:, iv, iu]
    if name == "wu":
        return planes[1][:, iu, iw]
    return planes[2][:, iw, iv]


def aware_inputs_loop(planes):
    """planes (3, C, R, R) -> (3, 3C, R, R): own features and the two line averages."""
    planes = np.asarray(planes, dtype=np.float64)
    _, c, r, _ = planes.shape
    out = np.zeros((3, 3 * c, r, r))
    names = ("uv", "wu", "vw")
    for p, name in enumerate(names):
        others = [names[(p + 1) % 3], names[(p + 2) % 3]]
        for row in range(r):
            for col in range(r):
                if name == "uv":
                    fixed = {"iu": col, "iv": row}
                    free = "iw"
                elif name == "wu":
                    fixed = {"iw": col, "iu": row}
                    free = "iv"
                else:
                    fixed = {"iv": col, "iw": row}
                    free = "iu"
                feats = [planes[p][:, row, col]]
                for other in others:
                    acc = np.zeros(c)
                    for s in range(r):
                        coords = dict(fixed)
                        coords[free] = s
                        acc += _plane_value(planes, other, coords["iu"], coords["iv"], coords["iw"])
                    feats.append(acc / r)
                out[p, :, row, col] = np.concatenate(feats)
    return out


def conv3daware_loop(planes, weight, bias=None):
    """weight (Cout, 3C, k, k) torch layout; per-plane zero padding k // 2."""
    stacked = aware_inputs_loop(planes)
    weight = np.asarray(weight, dtype=np.float64)
    kernel = weight.transpose(2, 3, 1, 0)
    pad = weight.shape[-1] // 2
    outs = []
    for p in range(3):
        y = conv2d_loop(stacked[p].transpose(1, 2, 0), kernel, 1, pad)
        if bias is not None:
            y = y + np.asarray(bias, dtype=np.float64)
        outs.append(y.transpose(2, 0, 1))
    return np.stack(outs)


# -- finite differences ---------------------------------------------------------

def fd_check(fn, inputs, eps=1e-6, n_probe=None, generator=None):
    """Max relative error between autograd and central differences of scalar ``fn``.

    ``inputs`` are float64 leaf tensors. With ``n_probe`` only that many random
    coordinates per input are probed.
    """
    inputs = [x.detach().clone().requires_grad_(True) for x in inputs]
    out = fn(*inputs)
    grads = torch.autograd.grad(out, inputs, allow_unused=True)
    worst = 0.0
    for k, (x, g) in enumerate(zip(inputs, grads)):
        g = torch.zeros_like(x) if g is None else g
        flat = x.detach().reshape(-1)
        idx = range(flat.numel())
        if n_probe is not None and flat.numel() > n_probe:
            idx = torch.randperm(flat.numel(), generator=generator)[:n_probe].tolist()
        for i in idx:
            args_p = [y.detach().clone() for y in inputs]
            args_m = [y.detach().clone() for y in inputs]
            args_p[k].reshape(-1)[i] += eps
            args_m[k].reshape(-1)[i] -= eps
            with torch.no_grad():
                num = (fn(*args_p) - fn(*args_m)).item() / (2 * eps)
            ana = g.reshape(-1)[i].item()
            scale = max(abs(num), abs(ana), 1e-4)
            worst = max(worst, abs(num - ana) / scale)
    return worst


def relative_fd_error(fn, inputs, eps=1e-6, n_probe=None, generator=None):
    """Relative error of the whole gradient vector: ||g_fd - g|| / ||g_fd||."""
    inputs = [x.detach().clone().requires_grad_(True) for x in inputs]
    out = fn(*inputs)
    grads = torch.autograd.grad(out, inputs, allow_unused=True)
    num_all, ana_all = [], []
    for k, (x, g) in enumerate(zip(inputs, grads)):
        g = torch.zeros_like(x) if g is None else g
        flat = x.detach().reshape(-1)
        idx = list(range(flat.numel()))
        if n_probe is not None and flat.numel() > n_probe:
            idx = torch.randperm(flat.numel(), generator=generator)[:n_probe].tolist()
        for i in idx:
            args_p = [y.detach().clone() for y in inputs]
            args_m = [y.detach().clone() for y in inputs]
            args_p[k].reshape(-1)[i] += eps
            args_m[k].reshape(-1)[i] -= eps
            with torch.no_grad():
                num_all.append((fn(*args_p) - fn(*args_m)).item() / (2 * eps))
            ana_all.append(g.reshape(-1)[i].item())
    num, ana = np.array(num_all), np.array(ana_all)
    return float(np.linalg.norm(num - ana) / max(np.linalg.norm(num), 1e-12))
