"""Differentiable primitives.

Every function takes and returns :class:`~flowdet.tensor.Tensor` objects and
registers its backward rule through :func:`~flowdet.tensor.make_node`.
Layout is N,C,H,W for feature maps.
"""

from __future__ import annotations

import builtins
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, make_node

_builtin_sum = builtins.sum


def _t(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, f"cannot broadcast {a.shape} with {b.shape}") from None


# --------------------------------------------------------------------------- arithmetic


def add(a, b) -> Tensor:
    a = _t(a, b if isinstance(b, Tensor) else None)
    b = _t(b, a)
    _check_broadcast("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_node(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a = _t(a, b if isinstance(b, Tensor) else None)
    b = _t(b, a)
    _check_broadcast("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_node(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a = _t(a, b if isinstance(b, Tensor) else None)
    b = _t(b, a)
    _check_broadcast("mul", a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_node(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a = _t(a, b if isinstance(b, Tensor) else None)
    b = _t(b, a)
    _check_broadcast("div", a, b)
    out = a.data / b.data

    def backward(g):
        gb = -g * out / b.data
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(gb, b.shape)

    return make_node(out, (a, b), backward, "div")


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return make_node(x.data * c, (x,), lambda g: (g * c,), "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul", "operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", f"inner extents differ: {a.shape[-1]} vs {b.shape[-2]}", axis=-1)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make_node(np.matmul(a.data, b.data), (a, b), backward, "matmul")


def einsum(spec: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum without repeated or operand-private summed indices."""
    lhs, out_idx = spec.replace(" ", "").split("->")
    ia, ib = lhs.split(",")
    for own, other in ((ia, ib), (ib, ia)):
        for ch in own:
            if ch not in other and ch not in out_idx:
                raise ValueError(f"einsum: index {ch!r} appears in one operand only")
    for ch in set(ia) & set(ib):
        if a.shape[ia.index(ch)] != b.shape[ib.index(ch)]:
            raise ShapeError("einsum", f"extent mismatch on index {ch!r}", axis=ch)
    out = np.einsum(spec, a.data, b.data, optimize=True)

    def backward(g):
        ga = np.einsum(f"{out_idx},{ib}->{ia}", g, b.data, optimize=True)
        gb = np.einsum(f"{out_idx},{ia}->{ib}", g, a.data, optimize=True)
        return ga, gb

    return make_node(out, (a, b), backward, "einsum")


# --------------------------------------------------------------------------- reductions / shape


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_node(np.asarray(out), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    return make_node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_node(
        np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),), "transpose"
    )


def index(x: Tensor, idx) -> Tensor:
    """Basic and integer-array indexing; backward scatters with accumulation."""

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return make_node(np.array(x.data[idx]), (x,), backward, "index")


def take(table: Tensor, indices: np.ndarray, axis: int = 0) -> Tensor:
    """Gather rows of ``table`` along ``axis`` (e.g. a relative-position bias lookup)."""
    indices = np.asarray(indices)

    def backward(g):
        gt = np.zeros_like(table.data)
        moved = np.moveaxis(gt, axis, 0)
        gm = np.moveaxis(g, tuple(range(axis, axis + indices.ndim)), tuple(range(indices.ndim)))
        np.add.at(moved, indices, gm)
        return (gt,)

    return make_node(np.take(table.data, indices, axis=axis), (table,), backward, "take")


def split(x: Tensor, sections: int | Sequence[int], axis: int = 1) -> list[Tensor]:
    """Split into equal ``sections`` or at explicit sizes along ``axis``."""
    n = x.shape[axis]
    if isinstance(sections, int):
        if n % sections:
            raise ShapeError("split", f"extent {n} not divisible by {sections}", axis=axis)
        sizes = [n // sections] * sections
    else:
        sizes = list(sections)
        if _builtin_sum(sizes) != n:
            raise ShapeError("split", f"sizes {sizes} do not sum to {n}", axis=axis)
    outs = []
    start = 0
    for size in sizes:
        sl = [slice(None)] * x.ndim
        sl[axis] = slice(start, start + size)
        sl = tuple(sl)

        def backward(g, sl=sl):
            gx = np.zeros_like(x.data)
            gx[sl] = g
            return (gx,)

        outs.append(make_node(x.data[sl].copy(), (x,), backward, "split"))
        start += size
    return outs


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    ref = xs[0]
    for t in xs[1:]:
        for ax in range(ref.ndim):
            if ax != axis % ref.ndim and t.shape[ax] != ref.shape[ax]:
                raise ShapeError("concat", f"extent {t.shape[ax]} != {ref.shape[ax]}", axis=ax)
    bounds = np.cumsum([0] + [t.shape[axis] for t in xs])

    def backward(g):
        out = []
        for i in range(len(xs)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(bounds[i], bounds[i + 1])
            out.append(g[tuple(sl)])
        return tuple(out)

    return make_node(np.concatenate([t.data for t in xs], axis=axis), tuple(xs), backward, "concat")


def pad2d(x: Tensor, top: int, bottom: int, left: int, right: int) -> Tensor:
    """Zero padding of the last two axes."""
    widths = [(0, 0)] * (x.ndim - 2) + [(top, bottom), (left, right)]
    h, w = x.shape[-2:]

    def backward(g):
        return (g[..., top:top + h, left:left + w],)

    return make_node(np.pad(x.data, widths), (x,), backward, "pad2d")


# --------------------------------------------------------------------------- elementwise


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_node(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return make_node(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def square(x: Tensor) -> Tensor:
    return make_node(x.data * x.data, (x,), lambda g: (2 * g * x.data,), "square")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return make_node(out, (x,), lambda g: (g / (2 * out),), "sqrt")


def abs(x: Tensor) -> Tensor:
    return make_node(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def sigmoid(x: Tensor) -> Tensor:
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ez = np.exp(x.data[~pos])
    out[~pos] = ez / (1.0 + ez)
    return make_node(out, (x,), lambda g: (g * out * (1 - out),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return make_node(out, (x,), lambda g: (g * (1 - out * out),), "tanh")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_node(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def silu(x: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-np.clip(x.data, -60, 60)))
    s = s.astype(x.dtype, copy=False)
    return make_node(x.data * s, (x,), lambda g: (g * (s * (1 + x.data * (1 - s))),), "silu")


def maximum(a: Tensor, b: Tensor) -> Tensor:
    a = _t(a, b if isinstance(b, Tensor) else None)
    b = _t(b, a)
    take_a = a.data >= b.data

    def backward(g):
        return _unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)

    return make_node(np.where(take_a, a.data, b.data), (a, b), backward, "maximum")


def minimum(a: Tensor, b: Tensor) -> Tensor:
    a = _t(a, b if isinstance(b, Tensor) else None)
    b = _t(b, a)
    take_a = a.data <= b.data

    def backward(g):
        return _unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)

    return make_node(np.where(take_a, a.data, b.data), (a, b), backward, "minimum")


def clamp_min(x: Tensor, lo: float) -> Tensor:
    mask = x.data >= lo
    return make_node(np.where(mask, x.data, x.dtype.type(lo)), (x,), lambda g: (g * mask,), "clamp_min")


# --------------------------------------------------------------------------- normalisation


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_node(out, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return make_node(out, (x,), backward, "log_softmax")


def layernorm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
              axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalise over ``axis``; ``gamma``/``beta`` broadcast along that axis."""
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    n = x.shape[axis]

    def backward(g):
        gx = inv * (g - g.mean(axis=axis, keepdims=True)
                    - xhat * (g * xhat).mean(axis=axis, keepdims=True))
        return (gx,)

    out = make_node(xhat.astype(x.dtype, copy=False), (x,), backward, "layernorm")
    if gamma is None and beta is None:
        return out
    shape = [1] * x.ndim
    shape[axis] = n
    if gamma is not None:
        out = mul(out, reshape(gamma, shape))
    if beta is not None:
        out = add(out, reshape(beta, shape))
    return out


# --------------------------------------------------------------------------- convolution


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Direct cross-correlation, N,C,H,W input and O,C,kh,kw kernel."""
    if x.ndim != 4:
        raise ShapeError("conv2d", f"input must be N,C,H,W, got rank {x.ndim}")
    if w.ndim != 4:
        raise ShapeError("conv2d", f"kernel must be O,C,kh,kw, got rank {w.ndim}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", f"input has {x.shape[1]} channels, kernel expects {w.shape[1]}", axis="C")
    if pad < 0:
        raise ValueError("conv2d: pad must be >= 0")
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("conv2d", f"kernel extents must be odd, got {kh}x{kw}", axis="kh/kw")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError("conv2d", f"kernel {kh}x{kw} larger than padded input {h}x{wd}", axis="H/W")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    if kh == 1 and kw == 1:
        cols = xp[:, :, ::stride, ::stride][:, :, :ho, :wo]
        out = np.einsum("nchw,oc->nohw", cols, w.data[:, :, 0, 0], optimize=True)
    else:
        cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
        out = np.tensordot(cols, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data.reshape(1, o, 1, 1)
    out = np.ascontiguousarray(out)

    def backward(g):
        if kh == 1 and kw == 1:
            gw = np.einsum("nohw,nchw->oc", g, cols, optimize=True).reshape(w.shape)
            gcols = np.einsum("nohw,oc->nchw", g, w.data[:, :, 0, 0], optimize=True)
            gxp = np.zeros_like(xp)
            gxp[:, :, : stride * ho : stride, : stride * wo : stride] = gcols
        else:
            gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
            gcols = np.tensordot(g, w.data, axes=([1], [0]))  # N,Ho,Wo,C,kh,kw
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
        gx = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return (gx, gw.astype(w.dtype, copy=False)) + ((gb,) if b is not None else ())

    parents = (x, w) + ((b,) if b is not None else ())
    return make_node(out, parents, backward, "conv2d")


def depthwise_conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int | None = None) -> Tensor:
    """Per-channel spatial filter; ``w`` is C,kh,kw. Default padding keeps H,W."""
    n, c, h, wd = x.shape
    if w.ndim != 3 or w.shape[0] != c:
        raise ShapeError("depthwise_conv2d", f"kernel {w.shape} does not match {c} channels", axis="C")
    _, kh, kw = w.shape
    if pad is None:
        pad = kh // 2
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((n, c, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            out += xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] * w.data[None, :, i, j, None, None]

    def backward(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        for i in range(kh):
            for j in range(kw):
                win = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
                gw[:, i, j] = (g * win).sum(axis=(0, 2, 3))
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += g * w.data[None, :, i, j, None, None]
        return gxp[:, :, pad : pad + h, pad : pad + wd], gw

    return make_node(out, (x, w), backward, "depthwise_conv2d")


def dwconv(x: Tensor, w_depth: Tensor, w_point: Tensor, b: Tensor | None = None) -> Tensor:
    """Depthwise-separable convolution: per-channel kh x kw filter, then 1x1 mixing (O,C)."""
    if w_point.ndim != 2 or w_point.shape[1] != x.shape[1]:
        raise ShapeError("dwconv", f"pointwise weight {w_point.shape} does not match {x.shape[1]} channels", axis="C")
    y = depthwise_conv2d(x, w_depth)
    return conv2d(y, reshape(w_point, w_point.shape + (1, 1)), b)


def avg_pool2d(x: Tensor, r: int) -> Tensor:
    """r x r average pooling with stride r; ragged edge cells average their valid pixels."""
    if r < 1:
        raise ValueError("avg_pool2d: r must be >= 1")
    n, c, h, w = x.shape
    ho, wo = -(-h // r), -(-w // r)
    xp = np.pad(x.data, ((0, 0), (0, 0), (0, ho * r - h), (0, wo * r - w)))
    counts = np.pad(np.ones((h, w), dtype=x.dtype), ((0, ho * r - h), (0, wo * r - w)))
    counts = counts.reshape(ho, r, wo, r).sum(axis=(1, 3))
    out = xp.reshape(n, c, ho, r, wo, r).sum(axis=(3, 5)) / counts

    def backward(g):
        gp = np.repeat(np.repeat(g / counts, r, axis=2), r, axis=3)
        return (np.ascontiguousarray(gp[:, :, :h, :w]),)

    return make_node(out, (x,), backward, "avg_pool2d")


# --------------------------------------------------------------------------- bilinear sampling


def deform_sample(x: Tensor, py: Tensor, px: Tensor) -> Tensor:
    """Bilinearly sample ``x`` at fractional pixel coordinates.

    ``x`` is N,C,H,W; ``py``/``px`` share any shape whose leading axis is N.
    Returns N,C,*coord_shape. Corners outside the map read as zero.
    Differentiable in ``x`` and in both coordinate tensors.
    """
    n, c, h, w = x.shape
    if py.shape != px.shape or py.shape[0] != n:
        raise ShapeError("deform_sample", f"coordinate shapes {py.shape}/{px.shape} vs batch {n}", axis=0)
    cshape = py.shape[1:]
    yy = py.data.reshape(n, -1)
    xx = px.data.reshape(n, -1)
    y0 = np.floor(yy)
    x0 = np.floor(xx)
    ly = (yy - y0).astype(x.dtype)
    lx = (xx - x0).astype(x.dtype)
    y0 = y0.astype(np.int64)
    x0 = x0.astype(np.int64)
    base = (np.arange(n, dtype=np.int64) * (h * w))[:, None]
    xf = x.data.transpose(1, 0, 2, 3).reshape(c, n * h * w)

    corners = []
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        yi = y0 + dy
        xi = x0 + dx
        valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        flat = base + np.clip(yi, 0, h - 1) * w + np.clip(xi, 0, w - 1)
        vals = xf[:, flat.reshape(-1)].reshape(c, n, -1) * valid[None]
        wy = ly if dy else 1 - ly
        wx = lx if dx else 1 - lx
        corners.append((flat, valid, vals, wy, wx))

    out = _builtin_sum(vals * (wy * wx)[None] for _, _, vals, wy, wx in corners)
    out_nc = np.ascontiguousarray(out.transpose(1, 0, 2)).reshape((n, c) + cshape)

    def backward(g):
        gc = g.reshape(n, c, -1).transpose(1, 0, 2)  # C,N,L
        gx_flat = np.zeros(c * n * h * w, dtype=x.dtype)
        chan_off = (np.arange(c, dtype=np.int64) * (n * h * w))[:, None]
        gy = np.zeros_like(ly)
        gxc = np.zeros_like(lx)
        for (flat, valid, vals, wy, wx), (dy, dx) in zip(corners, ((0, 0), (0, 1), (1, 0), (1, 1))):
            wts = (wy * wx * valid)[None] * gc
            idx = (chan_off + flat.reshape(1, -1)).reshape(-1)
            gx_flat += np.bincount(idx, weights=wts.reshape(-1), minlength=gx_flat.size).astype(x.dtype)
            s = (gc * vals).sum(axis=0)  # N,L
            gy += s * (wx if dy else -wx)
            gxc += s * (wy if dx else -wy)
        gx = gx_flat.reshape(c, n, h, w).transpose(1, 0, 2, 3)
        return (np.ascontiguousarray(gx),
                gy.reshape(py.shape).astype(py.dtype, copy=False),
                gxc.reshape(px.shape).astype(px.dtype, copy=False))

    return make_node(out_nc, (x, py, px), backward, "deform_sample")


def bilinear_sample(x: Tensor, p) -> Tensor:
    """Sample N,C,H,W ``x`` at one continuous (y, x) location -> N,C."""
    if isinstance(p, Tensor):
        py = reshape(index(p, 0), (1,))
        px = reshape(index(p, 1), (1,))
    else:
        py = Tensor(np.array([p[0]], dtype=x.dtype))
        px = Tensor(np.array([p[1]], dtype=x.dtype))
    n = x.shape[0]
    if n > 1:
        ones = Tensor(np.ones((n, 1), dtype=x.dtype))
        py = mul(ones, reshape(py, (1, 1)))
        px = mul(ones, reshape(px, (1, 1)))
    else:
        py = reshape(py, (1, 1))
        px = reshape(px, (1, 1))
    return reshape(deform_sample(x, py, px), (n, x.shape[1]))
