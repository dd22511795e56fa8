"""Differentiable primitives over :class:`~agfanet.tensor.Tensor`.

Layout is channels-first: per-sample ``[C, D, H, W]`` or batched
``[N, C, D, H, W]``. Spatial ops accept either and return the same rank.

Broadcasting in :func:`add`/:func:`mul` follows numpy, with one extra rule
checked first: a channel vector (shape ``[C]`` against ``[C, D, H, W]``, or
``[N, C]`` against ``[N, C, D, H, W]``) is expanded over the spatial axes.
A ``[1, D, H, W]`` map broadcasts over channels by plain numpy rules.
"""
from __future__ import annotations

import builtins
import itertools
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .tensor import DTYPE, ShapeError, Tensor, make_result

_AXIS_NAMES = ("depth", "height", "width")


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _triple(v, name: str) -> tuple:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    v = tuple(int(i) for i in v)
    if len(v) != 3:
        raise ShapeError(f"{name} must be an int or a triple, got {v}")
    return v


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _is_channel_vector(vec: np.ndarray, full: np.ndarray) -> bool:
    return full.ndim in (4, 5) and vec.ndim == full.ndim - 3 and vec.shape == full.shape[: vec.ndim]


def _aligned(a: np.ndarray, b: np.ndarray) -> tuple:
    """Return views of a, b that numpy can broadcast, applying the channel rule."""
    if a.shape == b.shape:
        return a, b
    if _is_channel_vector(b, a):
        return a, b.reshape(b.shape + (1, 1, 1))
    if _is_channel_vector(a, b):
        return a.reshape(a.shape + (1, 1, 1)), b
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shapes {a.shape} and {b.shape} are not broadcastable") from None
    return a, b


# -- elementwise arithmetic ---------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    av, bv = _aligned(a.data, b.data)

    def bw(g):
        return _unbroadcast(g, av.shape).reshape(a.shape), _unbroadcast(g, bv.shape).reshape(b.shape)

    return make_result(av + bv, (a, b), "add", bw)


def sub(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    av, bv = _aligned(a.data, b.data)

    def bw(g):
        return _unbroadcast(g, av.shape).reshape(a.shape), -_unbroadcast(g, bv.shape).reshape(b.shape)

    return make_result(av - bv, (a, b), "sub", bw)


def mul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    av, bv = _aligned(a.data, b.data)

    def bw(g):
        ga = _unbroadcast(g * bv, av.shape).reshape(a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * av, bv.shape).reshape(b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(av * bv, (a, b), "mul", bw)


def div(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    av, bv = _aligned(a.data, b.data)
    out = av / bv

    def bw(g):
        ga = _unbroadcast(g / bv, av.shape).reshape(a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bv, bv.shape).reshape(b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), "div", bw)


def elementwise(a, b, kind: str) -> Tensor:
    if kind == "add":
        return add(a, b)
    if kind == "mul":
        return mul(a, b)
    raise ValueError(f"unknown elementwise kind {kind!r}")


# -- unary ------------------------------------------------------------------

def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_result(out, (x,), "exp", lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return make_result(np.log(xd), (x,), "log", lambda g: (g / xd,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; gradient passes only where the input is inside."""
    xd = x.data
    inside = (xd >= lo) & (xd <= hi)
    return make_result(np.clip(xd, lo, hi), (x,), "clip", lambda g: (g * inside,))


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # two-branch form avoids overflow of exp for large |x|
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    # keep outputs strictly inside (0, 1) even where float64 saturates
    tiny = np.finfo(DTYPE).tiny
    out = np.clip(out, tiny, np.nextafter(1.0, 0.0))
    return make_result(out, (x,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def relu(x: Tensor) -> Tensor:
    xd = x.data
    pos = xd > 0
    # NaN must survive so non-finite losses are detected downstream
    return make_result(np.where(xd <= 0, 0.0, xd), (x,), "relu", lambda g: (g * pos,))


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "relu":
        return relu(x)
    raise ValueError(f"unknown activation {kind!r}")


# -- reductions and shape ops ---------------------------------------------------

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    xd = x.data
    out = xd.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, xd.shape).copy(),)

    return make_result(out, (x,), "sum", bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    xd = x.data
    count = xd.size if axis is None else int(np.prod([xd.shape[a] for a in np.atleast_1d(axis)]))
    out = xd.mean(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, xd.shape).copy(),)

    return make_result(out, (x,), "mean", bw)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = x.shape
    return make_result(x.data.reshape(shape), (x,), "reshape", lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_result(np.transpose(x.data, axes), (x,), "transpose", lambda g: (np.transpose(g, inv),))


def swap_last(x: Tensor) -> Tensor:
    """Transpose the two trailing axes (matrix transpose, batch-aware)."""
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def concat(inputs: Sequence[Tensor], axis: int = 0) -> Tensor:
    inputs = [_t(t) for t in inputs]
    if not inputs:
        raise ShapeError("concat of an empty list")
    ref = inputs[0].shape
    ax = axis % len(ref)
    for i, t in enumerate(inputs[1:], start=1):
        if t.ndim != len(ref) or any(t.shape[d] != ref[d] for d in range(len(ref)) if d != ax):
            raise ShapeError(f"concat: input {i} has shape {t.shape}, incompatible with {ref} off axis {ax}")
    sizes = [t.shape[ax] for t in inputs]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in inputs], axis=ax)
    return make_result(out, inputs, "concat", lambda g: tuple(np.split(g, bounds, axis=ax)))


def split(x: Tensor, sizes: Sequence[int], axis: int = 0) -> list:
    ax = axis % x.ndim
    if builtins.sum(sizes) != x.shape[ax]:
        raise ShapeError(f"split sizes {list(sizes)} do not add up to extent {x.shape[ax]} on axis {ax}")
    outs, start = [], 0
    for n in sizes:
        idx = [slice(None)] * x.ndim
        idx[ax] = slice(start, start + n)
        idx = tuple(idx)

        def bw(g, idx=idx):
            full = np.zeros(x.shape, dtype=DTYPE)
            full[idx] = g
            return (full,)

        outs.append(make_result(x.data[idx].copy(), (x,), "split", bw))
        start += n
    return outs



def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the trailing two axes, numpy batch rules on the rest."""
    a, b = _t(a), _t(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands need at least two axes")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape[-1]} vs {b.shape[-2]}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(ad @ bd, (a, b), "matmul", bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    z = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), "softmax", bw)


# -- spatial helpers ------------------------------------------------------------

def _batched(xd: np.ndarray, what: str) -> tuple:
    if xd.ndim == 5:
        return xd, True
    if xd.ndim == 4:
        return xd[None], False
    raise ShapeError(f"{what} expects [C,D,H,W] or [N,C,D,H,W], got shape {xd.shape}")


def _unbatch(arr: np.ndarray, batched: bool) -> np.ndarray:
    return arr if batched else arr[0]


# -- convolution ----------------------------------------------------------------

# float64 elements per im2col block
_COLUMN_BUDGET = 1 << 20
_IM2COL_MAX_TAPS = 64

@dataclass(frozen=True)
class ConvParams:
    """Geometry of a 3D convolution.

    ``same(k, d)`` builds the stride-1 padding ``d*(k-1)/2`` that keeps the
    spatial extents unchanged.
    """

    kernel_extent: tuple = (3, 3, 3)
    dilation: tuple = (1, 1, 1)
    padding: tuple = (0, 0, 0)
    stride: tuple = (1, 1, 1)
    in_channels: int = 1
    out_channels: int = 1

    def __post_init__(self):
        for name in ("kernel_extent", "dilation", "padding", "stride"):
            object.__setattr__(self, name, _triple(getattr(self, name), name))
        if any(k <= 0 or k % 2 == 0 for k in self.kernel_extent):
            raise ShapeError(f"kernel extents must be odd and positive, got {self.kernel_extent}")
        if any(d <= 0 for d in self.dilation) or any(s <= 0 for s in self.stride):
            raise ShapeError("dilation and stride must be positive")
        if any(p < 0 for p in self.padding):
            raise ShapeError("padding must be non-negative")
        if self.in_channels <= 0 or self.out_channels <= 0:
            raise ShapeError("channel counts must be positive")

    @classmethod
    def same(cls, in_channels: int, out_channels: int, kernel=3, dilation=1) -> "ConvParams":
        k, d = _triple(kernel, "kernel"), _triple(dilation, "dilation")
        pad = tuple(di * (ki - 1) // 2 for ki, di in zip(k, d))
        return cls(k, d, pad, (1, 1, 1), in_channels, out_channels)

    @property
    def weight_shape(self) -> tuple:
        return (self.out_channels, self.in_channels) + self.kernel_extent

    def output_extents(self, extents: Sequence[int]) -> tuple:
        out = []
        for ax, n in enumerate(extents):
            k, d, p, s = self.kernel_extent[ax], self.dilation[ax], self.padding[ax], self.stride[ax]
            o = (n + 2 * p - d * (k - 1) - 1) // s + 1
            if o <= 0:
                raise ShapeError(
                    f"conv3d: {_AXIS_NAMES[ax]} axis extent {n} too small for kernel {k}, "
                    f"dilation {d}, padding {p} (output extent {o})"
                )
            out.append(o)
        return tuple(out)


def conv3d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           params: Optional[ConvParams] = None, *, padding=None, dilation=1, stride=1) -> Tensor:
    """3D cross-correlation (no kernel flip) with dilation, zero padding and stride.

    Geometry comes from ``params`` when given; otherwise from the keyword
    arguments, with ``padding=None`` meaning "same" padding.
    """
    xd, batched = _batched(x.data, "conv3d")
    wd = weight.data
    if wd.ndim != 5:
        raise ShapeError(f"conv3d weight must be [C_out,C_in,kd,kh,kw], got {wd.shape}")
    cout, cin = wd.shape[:2]
    if params is None:
        k = wd.shape[2:]
        dil = _triple(dilation, "dilation")
        pad = tuple(di * (ki - 1) // 2 for ki, di in zip(k, dil)) if padding is None else _triple(padding, "padding")
        params = ConvParams(k, dil, pad, stride, cin, cout)
    if wd.shape != params.weight_shape:
        raise ShapeError(f"conv3d weight shape {wd.shape} does not match params {params.weight_shape}")
    if xd.shape[1] != cin:
        raise ShapeError(f"conv3d channel axis: input has {xd.shape[1]} channels, weight expects {cin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv3d bias shape {bias.shape} != ({cout},)")
    out_ext = params.output_extents(xd.shape[2:])

    n = xd.shape[0]
    pd, ph, pw = params.padding
    dd, dh, dw = params.dilation
    xp = np.pad(xd, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
    Dp, Hp, Wp = xp.shape[2:]
    # stride-1 output extents on the padded grid; strided output subsamples these
    full = (Dp - dd * (wd.shape[2] - 1), Hp - dh * (wd.shape[3] - 1), Wp - dw * (wd.shape[4] - 1))
    xflat = np.ascontiguousarray(xp.transpose(1, 0, 2, 3, 4)).reshape(cin, -1)
    total = xflat.shape[1]
    # each kernel tap reads a contiguous shifted window of the flattened padded input
    offsets = [
        i * dd * Hp * Wp + j * dh * Wp + k * dw
        for i, j, k in itertools.product(range(wd.shape[2]), range(wd.shape[3]), range(wd.shape[4]))
    ]
    ntaps = len(offsets)
    span = total - offsets[-1]
    chunk = max(256, _COLUMN_BUDGET // (ntaps * cin))
    # weight as [C_out, taps*C_in] matching the column layout below
    wmat = wd.transpose(0, 2, 3, 4, 1).reshape(cout, ntaps * cin)

    def columns(s: int, e: int) -> np.ndarray:
        cols = np.empty((ntaps, cin, e - s), dtype=DTYPE)
        for q, off in enumerate(offsets):
            cols[q] = xflat[:, off + s:off + e]
        return cols.reshape(ntaps * cin, e - s)

    # large kernels with few channels gain nothing from im2col; loop over taps
    per_tap = ntaps > _IM2COL_MAX_TAPS
    acc = np.zeros((cout, total), dtype=DTYPE)
    if per_tap:
        wtaps = wd.reshape(cout, cin, ntaps)
        for q, off in enumerate(offsets):
            acc[:, :span] += wtaps[:, :, q] @ xflat[:, off:off + span]
    else:
        for s in range(0, span, chunk):
            e = min(span, s + chunk)
            acc[:, s:e] = wmat @ columns(s, e)
    grid = acc.reshape(cout, n, Dp, Hp, Wp)
    sd, sh, sw = params.stride
    sel = (slice(None), slice(None),
           slice(0, full[0], sd), slice(0, full[1], sh), slice(0, full[2], sw))
    out = grid[sel].transpose(1, 0, 2, 3, 4)
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1, 1)
    out = np.ascontiguousarray(out)

    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g5 = g if batched else g[None]
        ggrid = np.zeros((cout, n, Dp, Hp, Wp), dtype=DTYPE)
        ggrid[sel] = g5.transpose(1, 0, 2, 3, 4)
        gflat = ggrid.reshape(cout, -1)
        need_x, need_w = x.requires_grad, weight.requires_grad
        dx = np.zeros((cin, total), dtype=DTYPE) if need_x else None
        gwm = np.zeros_like(wmat) if need_w else None
        if per_tap:
            gc = gflat[:, :span]
            gtaps = np.zeros((cout, cin, ntaps), dtype=DTYPE)
            for q, off in enumerate(offsets):
                if need_w:
                    gtaps[:, :, q] = gc @ xflat[:, off:off + span].T
                if need_x:
                    dx[:, off:off + span] += wtaps[:, :, q].T @ gc
            if need_w:
                gwm = gtaps.reshape(cout, cin, ntaps).transpose(0, 2, 1).reshape(cout, ntaps * cin)
        for s in range(0, 0 if per_tap else span, chunk):
            e = min(span, s + chunk)
            gc = gflat[:, s:e]
            if need_w:
                gwm += gc @ columns(s, e).T
            if need_x:
                dcols = (wmat.T @ gc).reshape(ntaps, cin, e - s)
                for q, off in enumerate(offsets):
                    dx[:, off + s:off + e] += dcols[q]
        gx = gw = None
        if need_x:
            dx = dx.reshape(cin, n, Dp, Hp, Wp)[:, :, pd:Dp - pd, ph:Hp - ph, pw:Wp - pw]
            gx = _unbatch(np.ascontiguousarray(dx.transpose(1, 0, 2, 3, 4)), batched)
        if need_w:
            gw = gwm.reshape((cout,) + wd.shape[2:] + (cin,)).transpose(0, 4, 1, 2, 3).copy()
        grads = [gx, gw]
        if bias is not None:
            grads.append(g5.sum(axis=(0, 2, 3, 4)) if bias.requires_grad else None)
        return tuple(grads)

    return make_result(_unbatch(out, batched), inputs, "conv3d", bw)


# -- pooling --------------------------------------------------------------------

def pool3d(x: Tensor, kind: str, window=2, stride=None) -> Tensor:
    """Windowed max/avg pooling; max routes gradient to the first maximum in scan order."""
    if kind not in ("max", "avg"):
        raise ValueError(f"unknown pool kind {kind!r}")
    win = _triple(window, "window")
    st = win if stride is None else _triple(stride, "stride")
    xd, batched = _batched(x.data, "pool3d")
    ext = xd.shape[2:]
    for ax in range(3):
        if win[ax] > ext[ax]:
            raise ShapeError(f"pool3d: window {win[ax]} exceeds {_AXIS_NAMES[ax]} extent {ext[ax]}")
    oext = tuple((ext[a] - win[a]) // st[a] + 1 for a in range(3))
    slices = []
    for i, j, k in itertools.product(range(win[0]), range(win[1]), range(win[2])):
        slices.append((slice(None), slice(None),
                       slice(i, i + st[0] * (oext[0] - 1) + 1, st[0]),
                       slice(j, j + st[1] * (oext[1] - 1) + 1, st[1]),
                       slice(k, k + st[2] * (oext[2] - 1) + 1, st[2])))
    if kind == "avg":
        acc = np.zeros(xd.shape[:2] + oext, dtype=DTYPE)
        for sl in slices:
            acc += xd[sl]
        out = acc / len(slices)

        def bw(g):
            g5 = (g if batched else g[None]) / len(slices)
            dx = np.zeros_like(xd)
            for sl in slices:
                dx[sl] += g5
            return (_unbatch(dx, batched),)
    else:
        best = xd[slices[0]].copy()
        arg = np.zeros(best.shape, dtype=np.intp)
        for o, sl in enumerate(slices[1:], start=1):
            cand = xd[sl]
            upd = cand > best
            best = np.where(upd, cand, best)
            arg[upd] = o
        out = best

        def bw(g):
            g5 = g if batched else g[None]
            dx = np.zeros_like(xd)
            for o, sl in enumerate(slices):
                dx[sl] += g5 * (arg == o)
            return (_unbatch(dx, batched),)

    return make_result(_unbatch(out, batched), (x,), f"{kind}_pool3d", bw)


def global_pool_channelwise(x: Tensor, kind: str) -> Tensor:
    """One value per channel: max or mean over all spatial positions.

    ``[C,D,H,W] -> [C]`` and ``[N,C,D,H,W] -> [N,C]``.
    """
    xd, batched = _batched(x.data, "global_pool_channelwise")
    n, c = xd.shape[:2]
    flat = xd.reshape(n, c, -1)
    count = flat.shape[2]
    if kind == "avg":
        out = flat.mean(axis=2)

        def bw(g):
            g2 = g if batched else g[None]
            dx = np.broadcast_to((g2 / count)[:, :, None], flat.shape).reshape(xd.shape)
            return (_unbatch(dx.copy(), batched),)
    elif kind == "max":
        arg = flat.argmax(axis=2)
        out = np.take_along_axis(flat, arg[:, :, None], axis=2)[:, :, 0]

        def bw(g):
            g2 = g if batched else g[None]
            dx = np.zeros_like(flat)
            np.put_along_axis(dx, arg[:, :, None], g2[:, :, None], axis=2)
            return (_unbatch(dx.reshape(xd.shape), batched),)
    else:
        raise ValueError(f"unknown pool kind {kind!r}")
    return make_result(_unbatch(out, batched), (x,), f"global_{kind}_pool", bw)


def spatial_pool_across_channels(x: Tensor, kind: str) -> Tensor:
    """Per-voxel max or mean over the channel axis, keeping a unit channel axis."""
    xd, batched = _batched(x.data, "spatial_pool_across_channels")
    c = xd.shape[1]
    if kind == "avg":
        out = xd.mean(axis=1, keepdims=True)

        def bw(g):
            g5 = g if batched else g[None]
            return (_unbatch(np.broadcast_to(g5 / c, xd.shape).copy(), batched),)
    elif kind == "max":
        arg = xd.argmax(axis=1)[:, None]
        out = np.take_along_axis(xd, arg, axis=1)

        def bw(g):
            g5 = g if batched else g[None]
            dx = np.zeros_like(xd)
            np.put_along_axis(dx, arg, g5, axis=1)
            return (_unbatch(dx, batched),)
    else:
        raise ValueError(f"unknown pool kind {kind!r}")
    return make_result(_unbatch(out, batched), (x,), f"channel_{kind}_pool", bw)


# -- batch normalization -----------------------------------------------------------

@dataclass
class RunningStats:
    """Per-channel running mean/variance for eval-mode batch norm."""

    mean: np.ndarray
    var: np.ndarray
    initialized: bool = False
    momentum: float = 0.1

    @classmethod
    def empty(cls, channels: int) -> "RunningStats":
        return cls(np.zeros(channels, dtype=DTYPE), np.ones(channels, dtype=DTYPE), False)

    def copy(self) -> "RunningStats":
        return RunningStats(self.mean.copy(), self.var.copy(), self.initialized, self.momentum)


BN_EPS = 1e-5


def batch_norm(x: Tensor, scale: Tensor, shift: Tensor, stats: RunningStats, mode: str = "train") -> Tensor:
    """Per-channel normalization.

    Train mode normalizes with the biased batch variance over every axis
    except the channel axis and updates ``stats`` in place (momentum 0.1,
    biased variance). Eval mode uses ``stats`` and refuses to run before they
    were ever updated or explicitly marked initialized.
    """
    xd, batched = _batched(x.data, "batch_norm")
    c = xd.shape[1]
    if scale.shape != (c,) or shift.shape != (c,):
        raise ShapeError(f"batch_norm: parameter length must equal {c} channels")
    axes = (0, 2, 3, 4)
    bshape = (1, c, 1, 1, 1)
    sc = scale.data.reshape(bshape)
    if mode == "train":
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        m = stats.momentum
        if stats.initialized:
            stats.mean = (1 - m) * stats.mean + m * mu
            stats.var = (1 - m) * stats.var + m * var
        else:
            stats.mean = mu.copy()
            stats.var = var.copy()
            stats.initialized = True
    elif mode == "eval":
        if not stats.initialized:
            raise RuntimeError("batch_norm eval mode before any train step; running stats are uninitialized")
        mu, var = stats.mean, stats.var
    else:
        raise ValueError(f"unknown batch_norm mode {mode!r}")
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (xd - mu.reshape(bshape)) * inv.reshape(bshape)
    out = xhat * sc + shift.data.reshape(bshape)
    count = xd.size // c

    def bw(g):
        g5 = g if batched else g[None]
        gscale = (g5 * xhat).sum(axis=axes) if scale.requires_grad else None
        gshift = g5.sum(axis=axes) if shift.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g5 * sc
            if mode == "train":
                s1 = dxhat.sum(axis=axes, keepdims=True)
                s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
                gx = inv.reshape(bshape) / count * (count * dxhat - s1 - xhat * s2)
            else:
                gx = dxhat * inv.reshape(bshape)
            gx = _unbatch(gx, batched)
        return gx, gscale, gshift

    return make_result(_unbatch(out, batched), (x, scale, shift), f"batch_norm_{mode}", bw)


# -- upsampling -------------------------------------------------------------------

def _linear_upsample_matrix(n: int, factor: int) -> np.ndarray:
    """Rows map output samples to input samples, half-pixel centers, edge clamped."""
    m = np.zeros((n * factor, n), dtype=DTYPE)
    for o in range(n * factor):
        src = max((o + 0.5) / factor - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n - 1)
        i1 = min(i0 + 1, n - 1)
        w1 = src - i0
        m[o, i0] += 1.0 - w1
        m[o, i1] += w1
    return m


def upsample_source_coords(n: int, factor: int = 2) -> np.ndarray:
    """Input coordinate sampled by each output index (after edge clamping)."""
    o = np.arange(n * factor)
    return np.clip((o + 0.5) / factor - 0.5, 0.0, n - 1)


def upsample_trilinear(x: Tensor, factor: int = 2) -> Tensor:
    """Trilinear upsampling with align-corners-false (cell-center) sampling."""
    xd, batched = _batched(x.data, "upsample_trilinear")
    mats = [_linear_upsample_matrix(n, factor) for n in xd.shape[2:]]
    out = xd
    for ax, m in zip((2, 3, 4), mats):
        out = np.moveaxis(np.tensordot(m, out, axes=(1, ax)), 0, ax)

    def bw(g):
        g5 = g if batched else g[None]
        for ax, m in zip((2, 3, 4), mats):
            g5 = np.moveaxis(np.tensordot(m.T, g5, axes=(1, ax)), 0, ax)
        return (_unbatch(np.ascontiguousarray(g5), batched),)

    return make_result(_unbatch(np.ascontiguousarray(out), batched), (x,), "upsample_trilinear", bw)
