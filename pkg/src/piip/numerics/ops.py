"""Differentiable primitives on :class:`~piip.numerics.tensor.Tensor`.

Every function here computes its forward result with numpy and, when a tape
is recording, registers a closure returning the gradient for each input.
Only contractions (``matmul``, ``conv2d``) and the two bilinear samplers
report work to the MAC counter; element-wise ops, reductions, norms and
softmax are free under the counting convention.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from scipy import special

from ..errors import DimensionError
from .tensor import Tensor, make_result, register_macs

_SQRT1_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _wrap(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _wrap(b, a)
    b = _wrap(b)
    return _wrap(a, b), b


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# element-wise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return make_result(a.data + b.data, (a, b),
                       lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return make_result(a.data - b.data, (a, b),
                       lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return make_result(ad * bd, (a, b),
                       lambda g: (unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def vjp(g):
        ga = g / bd
        return unbroadcast(ga, ad.shape), unbroadcast(-ga * out, bd.shape)

    return make_result(out, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return make_result(np.log(ad), (a,), lambda g: (g / ad,))


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``0.5 * x * (1 + erf(x / sqrt(2)))``."""
    xd = x.data
    cdf = 0.5 * (1.0 + special.erf(xd * _SQRT1_2))

    def vjp(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT_2PI
        return (g * (cdf + xd * pdf),)

    return make_result(xd * cdf, (x,), vjp)


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))
    out = x.data.sum(axis=axes, keepdims=keepdims)
    return make_result(np.asarray(out), (x,),
                       lambda g: (np.broadcast_to(g.reshape(kept), shape),))


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(sum(x, axis=axes, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return make_result(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                       lambda g: (g.transpose(inv),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(None))) or i is Ellipsis for i in items)


def getitem(x: Tensor, index) -> Tensor:
    shape, dtype = x.shape, x.dtype
    basic = _is_basic_index(index)
    out = x.data[index]

    def vjp(g):
        gx = np.zeros(shape, dtype=dtype)
        if basic:
            gx[index] = g
        else:
            np.add.at(gx, index, g)
        return (gx,)

    return make_result(np.array(out), (x,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if len(tensors) == 1:
        return tensors[0]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return make_result(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


# ---------------------------------------------------------------------------
# contractions
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``[..., m, k] @ [..., k, n]`` with broadcast batch dims.

    Registers ``m * k * n`` MACs per broadcast batch element.
    """
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as exc:
        raise DimensionError(f"matmul batch dims do not broadcast: {a.shape} @ {b.shape}") from exc
    m, k = a.shape[-2:]
    n = b.shape[-1]
    register_macs(int(np.prod(batch, dtype=np.int64)) * m * k * n)
    ad, bd = a.data, b.data

    def vjp(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return unbroadcast(ga, ad.shape), unbroadcast(gb, bd.shape)

    return make_result(ad @ bd, (a, b), vjp)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as ``[in, out]``."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding: int = 0) -> Tensor:
    """Stride-1 2-D cross-correlation. ``x``: [B, C, H, W], ``weight``: [O, C, kh, kw]."""
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    bsz, cin, h, w = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin != cin_w:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, weight {weight.shape}")
    p = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    ho, wo = h + 2 * p - kh + 1, w + 2 * p - kw + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d output would be empty for input {x.shape}")
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    # [B, C, ho, wo, kh, kw] -> [B, C*kh*kw, ho*wo]
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(bsz, cin * kh * kw, ho * wo)
    wmat = weight.data.reshape(cout, cin * kh * kw)
    register_macs(bsz * cout * ho * wo * cin * kh * kw)
    out = (wmat @ cols).reshape(bsz, cout, ho, wo)
    wd = weight.data

    def vjp(g):
        gf = g.reshape(bsz, cout, ho * wo)
        gw = np.einsum("bop,bkp->ok", gf, cols).reshape(wd.shape)
        gcols = (wmat.T @ gf).reshape(bsz, cin, kh, kw, ho, wo)
        gxp = np.zeros(xp.shape, dtype=xp.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + ho, j:j + wo] += gcols[:, :, i, j]
        gx = gxp[:, :, p:p + h, p:p + w] if p else gxp
        return gx, gw

    y = make_result(out, (x, weight), vjp)
    if bias is not None:
        y = add(y, reshape(bias, (1, cout, 1, 1)))
    return y


# ---------------------------------------------------------------------------
# normalisation and attention helpers
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted softmax; rows are non-negative and sum to one."""
    if x.shape[axis] == 0:
        raise DimensionError(f"softmax over an empty axis, shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), vjp)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] == 0:
        raise DimensionError(f"log_softmax over an empty axis, shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (x,), vjp)


def standardize(x: Tensor, axes=-1, eps: float = 1e-6) -> Tensor:
    """Zero mean, unit variance over ``axes`` (biased variance, ``eps`` inside the root)."""
    axes = _norm_axes(axes, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes]))
    if n == 0:
        raise DimensionError(f"cannot normalise over an empty axis, shape {x.shape}")
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def vjp(g):
        gm = g.mean(axis=axes, keepdims=True)
        gxm = (g * xhat).mean(axis=axes, keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    return make_result(xhat, (x,), vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise DimensionError("layer_norm over a zero-width feature axis")
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match D={d}")
    return add(mul(standardize(x, -1, eps), gain), bias)


def group_norm(x: Tensor, groups: int, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """GroupNorm on channel-first input ``[B, C, *spatial]``.

    Each group of ``C // groups`` channels is normalised jointly over its
    channels and all spatial positions, then a per-channel affine is applied.
    """
    if x.ndim < 2:
        raise DimensionError(f"group_norm needs [B, C, ...] input, got {x.shape}")
    bsz, c = x.shape[:2]
    if c % groups:
        raise DimensionError(f"{c} channels not divisible into {groups} groups")
    shape = x.shape
    y = standardize(reshape(x, (bsz, groups, -1)), -1, eps)
    y = reshape(y, shape)
    bshape = (1, c) + (1,) * (x.ndim - 2)
    return add(mul(y, reshape(gain, bshape)), reshape(bias, bshape))


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits`` [B, K]."""
    labels = np.asarray(labels, dtype=np.int64)
    lp = log_softmax(logits, axis=-1)
    picked = getitem(lp, (np.arange(labels.shape[0]), labels))
    return neg(mean(picked))


# ---------------------------------------------------------------------------
# bilinear resampling
# ---------------------------------------------------------------------------

def resize_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """``[n_out, n_in]`` interpolation matrix, half-pixel centres (align_corners=False)."""
    r = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        r[i, i0] += 1.0 - lam
        r[i, i1] += lam
    return r


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Resize the trailing ``[H, W]`` axes of ``x`` with half-pixel bilinear weights.

    Borders clamp to the edge pixel. Equal sizes return ``x`` unchanged.
    Registers 4 MACs per output element per channel when sizes differ.
    """
    if x.ndim < 2:
        raise DimensionError(f"bilinear_resize needs [..., H, W], got {x.shape}")
    h, w = x.shape[-2:]
    if min(h, w) < 1 or out_h < 1 or out_w < 1:
        raise DimensionError(f"bilinear_resize {x.shape} -> ({out_h}, {out_w}) has an empty side")
    if (h, w) == (out_h, out_w):
        return x
    lead = int(np.prod(x.shape[:-2], dtype=np.int64))
    register_macs(4 * lead * out_h * out_w)
    rh = resize_matrix(h, out_h, x.dtype)
    rw = resize_matrix(w, out_w, x.dtype)
    out = rh @ (x.data @ rw.T)
    return make_result(out, (x,), lambda g: (rh.T @ (g @ rw),))


def _pixel_coords(u: np.ndarray, size: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Map normalised coords to (lower index, fraction, d pixel / d u)."""
    px = u * size - 0.5
    # coordinates a few ulps from a pixel centre are snapped onto it so grid hits are exact
    near = np.rint(px)
    snap = np.abs(px - near) <= 8 * np.finfo(px.dtype).eps * np.maximum(1.0, np.abs(px))
    px = np.where(snap, near, px)
    dpx = np.where((px > 0) & (px < size - 1), float(size), 0.0).astype(px.dtype)
    px = np.clip(px, 0.0, size - 1)
    i0 = np.clip(np.floor(px), 0, max(size - 2, 0)).astype(np.int64)
    frac = (px - i0).astype(px.dtype)
    return i0, frac, dpx


def grid_sample_bilinear(value: Tensor, points: Tensor) -> Tensor:
    """Bilinearly sample ``value`` [..., C, H, W] at ``points`` [..., P, 2].

    Points are ``(x, y)`` in normalised image coordinates where pixel ``(i, j)``
    has its centre at ``((j + 0.5) / W, (i + 0.5) / H)``. Out-of-range points
    clamp to the border. Returns ``[..., P, C]`` and registers 4 MACs per
    sampled point per channel.
    """
    if value.ndim < 3 or points.ndim < 2 or points.shape[-1] != 2:
        raise DimensionError(f"grid_sample_bilinear got value {value.shape}, points {points.shape}")
    lead = value.shape[:-3]
    if points.shape[:-2] != lead:
        raise DimensionError(f"leading dims differ: value {value.shape}, points {points.shape}")
    c, h, w = value.shape[-3:]
    npts = points.shape[-2]
    nb = int(np.prod(lead, dtype=np.int64))
    register_macs(4 * nb * npts * c)

    vt = value.data.reshape(nb, c, h * w).transpose(0, 2, 1)  # [N, HW, C]
    pts = points.data.reshape(nb, npts, 2)
    x0, fx, dx = _pixel_coords(pts[..., 0], w)
    y0, fy, dy = _pixel_coords(pts[..., 1], h)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    bidx = np.arange(nb)[:, None]
    i00, i01, i10, i11 = y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1
    v00, v01, v10, v11 = vt[bidx, i00], vt[bidx, i01], vt[bidx, i10], vt[bidx, i11]
    ex, ey = fx[..., None], fy[..., None]
    top = v00 * (1 - ex) + v01 * ex
    bot = v10 * (1 - ex) + v11 * ex
    out = top * (1 - ey) + bot * ey
    vshape, pshape = value.shape, points.shape

    def vjp(g):
        g = g.reshape(nb, npts, c)
        gv = np.zeros((nb, h * w, c), dtype=g.dtype)
        for idx, wgt in ((i00, (1 - ex) * (1 - ey)), (i01, ex * (1 - ey)),
                         (i10, (1 - ex) * ey), (i11, ex * ey)):
            np.add.at(gv, (np.broadcast_to(bidx, idx.shape), idx), g * wgt)
        gv = gv.transpose(0, 2, 1).reshape(vshape)
        gfx = (g * ((1 - ey) * (v01 - v00) + ey * (v11 - v10))).sum(-1)
        gfy = (g * (bot - top)).sum(-1)
        gp = np.stack([gfx * dx, gfy * dy], axis=-1).reshape(pshape)
        return gv, gp

    return make_result(out.reshape(lead + (npts, c)), (value, points), vjp)
