"""Differentiable primitives.

Every primitive is a :class:`Function` subclass registered under a kind name
so it can also be reached through :func:`primitive_forward`.  Each forward
saves only what its backward needs given which inputs require gradients;
parameter tensors are saved by reference.
"""
import contextlib
import hashlib
import itertools

import numpy as np

from . import kernels
from .tensor import (
    Function,
    ShapeError,
    Tensor,
    UnknownPrimitiveError,
    add_flops,
    as_tensor,
    saved_array,
    unpack,
)

PRIMITIVES = {}


def register(kind):
    def deco(cls):
        cls.name = kind
        PRIMITIVES[kind] = cls
        return cls

    return deco


def primitive_forward(kind, inputs, attrs=None):
    """Apply the primitive called ``kind`` to ``inputs`` with keyword ``attrs``."""
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise UnknownPrimitiveError(f"unknown primitive {kind!r}") from None
    return fn.apply(*inputs, **(attrs or {}))


def unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(kind, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: cannot broadcast {a.shape} with {b.shape}") from None


# ----------------------------------------------------------------------------
# element-wise
# ----------------------------------------------------------------------------

@register("add")
class Add(Function):
    @staticmethod
    def forward(ctx, a, b):
        _broadcast_shape("add", a, b)
        ctx.attrs["shapes"] = (a.shape, b.shape)
        return a.data + b.data

    @staticmethod
    def backward(ctx, g):
        sa, sb = ctx.attrs["shapes"]
        return (
            unbroadcast(g, sa) if ctx.needs[0] else None,
            unbroadcast(g, sb) if ctx.needs[1] else None,
        )


@register("sub")
class Sub(Function):
    @staticmethod
    def forward(ctx, a, b):
        _broadcast_shape("sub", a, b)
        ctx.attrs["shapes"] = (a.shape, b.shape)
        return a.data - b.data

    @staticmethod
    def backward(ctx, g):
        sa, sb = ctx.attrs["shapes"]
        return (
            unbroadcast(g, sa) if ctx.needs[0] else None,
            unbroadcast(-g, sb) if ctx.needs[1] else None,
        )


@register("mul")
class Mul(Function):
    @staticmethod
    def forward(ctx, a, b):
        _broadcast_shape("mul", a, b)
        ctx.attrs["shapes"] = (a.shape, b.shape)
        ctx.save(
            saved_array(b) if ctx.needs[0] else None,
            saved_array(a) if ctx.needs[1] else None,
        )
        return a.data * b.data

    @staticmethod
    def backward(ctx, g):
        sa, sb = ctx.attrs["shapes"]
        b, a = (unpack(s) for s in ctx.saved)
        return (
            unbroadcast(g * b, sa) if ctx.needs[0] else None,
            unbroadcast(g * a, sb) if ctx.needs[1] else None,
        )


@register("scale")
class Scale(Function):
    @staticmethod
    def forward(ctx, a, factor=1.0):
        ctx.attrs["factor"] = float(factor)
        return a.data * float(factor)

    @staticmethod
    def backward(ctx, g):
        return (g * ctx.attrs["factor"],)


@register("gelu")
class Gelu(Function):
    @staticmethod
    def forward(ctx, x):
        ctx.save(x.data)
        return kernels.gelu_fwd(x.data)

    @staticmethod
    def backward(ctx, g):
        (x,) = ctx.saved
        return (kernels.gelu_bwd(g, x),)


# ----------------------------------------------------------------------------
# linear algebra
# ----------------------------------------------------------------------------

def _swap(x):
    return np.swapaxes(x, -1, -2)


@register("matmul")
class MatMul(Function):
    """Batched ``a @ b`` with numpy broadcasting over leading axes."""

    @staticmethod
    def forward(ctx, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
        out = np.matmul(a.data, b.data)
        add_flops(2 * out.size * a.shape[-1])
        ctx.attrs["shapes"] = (a.shape, b.shape)
        ctx.save(
            saved_array(b) if ctx.needs[0] else None,
            saved_array(a) if ctx.needs[1] else None,
        )
        return out

    @staticmethod
    def backward(ctx, g):
        sa, sb = ctx.attrs["shapes"]
        b, a = (unpack(s) for s in ctx.saved)
        ga = unbroadcast(np.matmul(g, _swap(b)), sa) if ctx.needs[0] else None
        gb = unbroadcast(np.matmul(_swap(a), g), sb) if ctx.needs[1] else None
        return ga, gb


def _conv_out(kind, size, k, stride, pad):
    span = size + 2 * pad - k
    if span < 0:
        raise ShapeError(f"{kind}: kernel {k} larger than padded extent {size + 2 * pad}")
    return span // stride + 1


@register("conv")
class Conv(Function):
    """Cross-correlation over 2 or 3 trailing spatial axes with zero padding.

    x: [B, Cin, *S]; w: [Cout, Cin, *K]; b: [Cout].
    """

    @staticmethod
    def forward(ctx, x, w, b, stride=1, padding=0):
        nsp = w.ndim - 2
        if nsp not in (2, 3) or x.ndim != nsp + 2:
            raise ShapeError(f"conv{nsp}d: input rank {x.ndim} incompatible with weight {w.shape}")
        if x.shape[1] != w.shape[1]:
            raise ShapeError(f"conv{nsp}d: input channels {x.shape[1]} != weight channels {w.shape[1]}")
        if b.shape != (w.shape[0],):
            raise ShapeError(f"conv{nsp}d: bias shape {b.shape} != ({w.shape[0]},)")
        strides = (stride,) * nsp if np.isscalar(stride) else tuple(stride)
        pads = (padding,) * nsp if np.isscalar(padding) else tuple(padding)
        if min(strides) < 1 or min(pads) < 0:
            raise ShapeError(f"conv{nsp}d: stride must be >= 1 and padding >= 0")
        ksz = w.shape[2:]
        spatial = x.shape[2:]
        osz = tuple(
            _conv_out(f"conv{nsp}d", s, k, st, p) for s, k, st, p in zip(spatial, ksz, strides, pads)
        )
        cout, cin = w.shape[:2]
        bsz = x.shape[0]
        ctx.attrs.update(strides=strides, pads=pads, osz=osz, xshape=x.shape, wshape=w.shape)
        add_flops(2 * bsz * int(np.prod(osz)) * cout * cin * int(np.prod(ksz)))
        ctx.save(
            saved_array(w) if ctx.needs[0] else None,
            saved_array(x) if ctx.needs[1] else None,
        )
        xd, wd = x.data, w.data
        if _is_patchify(spatial, ksz, strides, pads):
            cols = _patchify(xd, ksz)  # [B, *O, Cin*prod(K)]
            out = cols @ wd.reshape(cout, -1).T
        else:
            xp = _pad_spatial(xd, pads)
            xl = np.moveaxis(xp, 1, -1)
            out = np.zeros((bsz,) + osz + (cout,))
            for off in itertools.product(*(range(k) for k in ksz)):
                sl = _offset_slice(off, osz, strides)
                out += xl[(slice(None),) + sl] @ wd[(slice(None), slice(None)) + off].T
        out += b.data
        return np.ascontiguousarray(np.moveaxis(out, -1, 1))

    @staticmethod
    def backward(ctx, g):
        a = ctx.attrs
        w, x = (unpack(s) for s in ctx.saved)
        cout, cin = a["wshape"][:2]
        ksz = a["wshape"][2:]
        spatial = a["xshape"][2:]
        gl = np.moveaxis(g, 1, -1)  # [B, *O, Cout]
        gx = gw = gb = None
        if ctx.needs[2]:
            gb = gl.reshape(-1, cout).sum(axis=0)
        if _is_patchify(spatial, ksz, a["strides"], a["pads"]):
            if ctx.needs[0]:
                cols_g = gl @ w.reshape(cout, -1)
                gx = _unpatchify(cols_g, a["xshape"], ksz)
            if ctx.needs[1]:
                cols = _patchify(x, ksz)
                gw = (gl.reshape(-1, cout).T @ cols.reshape(-1, cols.shape[-1])).reshape(a["wshape"])
            return gx, gw, gb
        if ctx.needs[0]:
            pshape = (a["xshape"][0],) + tuple(s + 2 * p for s, p in zip(spatial, a["pads"])) + (cin,)
            gxl = np.zeros(pshape)
        if ctx.needs[1]:
            xl = np.moveaxis(_pad_spatial(x, a["pads"]), 1, -1)
            gw = np.zeros(a["wshape"])
        g2 = gl.reshape(-1, cout)
        for off in itertools.product(*(range(k) for k in ksz)):
            sl = (slice(None),) + _offset_slice(off, a["osz"], a["strides"])
            widx = (slice(None), slice(None)) + off
            if ctx.needs[0]:
                gxl[sl] += gl @ w[widx]
            if ctx.needs[1]:
                gw[widx] = g2.T @ xl[sl].reshape(-1, cin)
        if ctx.needs[0]:
            gxp = np.moveaxis(gxl, -1, 1)
            crop = (slice(None), slice(None)) + tuple(
                slice(p, p + s) for p, s in zip(a["pads"], spatial)
            )
            gx = np.ascontiguousarray(gxp[crop])
        return gx, gw, gb


def _is_patchify(spatial, ksz, strides, pads):
    return (
        tuple(ksz) == tuple(strides)
        and not any(pads)
        and all(s % k == 0 for s, k in zip(spatial, ksz))
    )


def _patchify(x, ksz):
    """[B, C, *S] -> [B, *O, C*prod(K)] for non-overlapping kernel-sized blocks."""
    bsz, c = x.shape[:2]
    osz = tuple(s // k for s, k in zip(x.shape[2:], ksz))
    inter = []
    for o, k in zip(osz, ksz):
        inter += [o, k]
    v = x.reshape((bsz, c) + tuple(inter))
    n = len(ksz)
    o_axes = [2 + 2 * i for i in range(n)]
    k_axes = [3 + 2 * i for i in range(n)]
    v = v.transpose([0] + o_axes + [1] + k_axes)
    return v.reshape((bsz,) + osz + (-1,))


def _unpatchify(cols, xshape, ksz):
    bsz, c = xshape[:2]
    n = len(ksz)
    osz = cols.shape[1 : 1 + n]
    v = cols.reshape((bsz,) + tuple(osz) + (c,) + tuple(ksz))
    order = [0, 1 + n]
    for i in range(n):
        order += [1 + i, 2 + n + i]
    return np.ascontiguousarray(v.transpose(order).reshape(xshape))


def _pad_spatial(x, pads):
    if not any(pads):
        return x
    return np.pad(x, ((0, 0), (0, 0)) + tuple((p, p) for p in pads))


def _offset_slice(off, osz, strides):
    return tuple(slice(o, o + st * (n - 1) + 1, st) for o, n, st in zip(off, osz, strides))


_argmax_trace = None


@contextlib.contextmanager
def trace_pool_argmax():
    """Yield a hash object updated with every max-pool argmax pattern computed inside."""
    global _argmax_trace
    prev = _argmax_trace
    _argmax_trace = hashlib.sha1()
    try:
        yield _argmax_trace
    finally:
        _argmax_trace = prev


@register("maxpool3d")
class MaxPool3d(Function):
    """Stride-1, same-size 3D max pool over the last three axes.

    Borders use replicate padding; gradient goes to the first maximal element
    (lowest linear index) of each window.
    """

    @staticmethod
    def forward(ctx, x, kernel=(3, 1, 1)):
        kernel = tuple(int(k) for k in kernel)
        if x.ndim < 3:
            raise ShapeError(f"maxpool3d: need at least 3 axes, got {x.shape}")
        if len(kernel) != 3 or any(k < 1 or k % 2 == 0 for k in kernel):
            raise ShapeError(f"maxpool3d: kernel extents must be odd and positive, got {kernel}")
        lead = x.shape[:-3]
        flat = x.data.reshape((-1,) + x.shape[-3:])
        out, idx = kernels.maxpool_fwd(flat, *kernel)
        if _argmax_trace is not None:
            _argmax_trace.update(idx.tobytes())
        ctx.attrs["flat_shape"] = flat.shape
        ctx.attrs["shape"] = x.shape
        ctx.save(idx)
        return out.reshape(lead + x.shape[-3:])

    @staticmethod
    def backward(ctx, g):
        (idx,) = ctx.saved
        fs = ctx.attrs["flat_shape"]
        gx = kernels.maxpool_bwd(g.reshape(fs), idx, fs)
        return (gx.reshape(ctx.attrs["shape"]),)


# ----------------------------------------------------------------------------
# normalisation / probabilities
# ----------------------------------------------------------------------------

@register("layer_norm")
class LayerNorm(Function):
    @staticmethod
    def forward(ctx, x, gamma, beta, eps=1e-5):
        c = x.shape[-1]
        if gamma.shape != (c,) or beta.shape != (c,):
            raise ShapeError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} vs channels {c}")
        out, xhat, rstd = kernels.layer_norm_fwd(x.data.reshape(-1, c), gamma.data, beta.data, eps)
        ctx.save(xhat, rstd, saved_array(gamma))
        ctx.attrs["shape"] = x.shape
        return out.reshape(x.shape)

    @staticmethod
    def backward(ctx, g):
        xhat, rstd, gamma = ctx.saved
        shape = ctx.attrs["shape"]
        gx, gg, gb = kernels.layer_norm_bwd(g.reshape(-1, shape[-1]), xhat, rstd, unpack(gamma))
        return (
            gx.reshape(shape) if ctx.needs[0] else None,
            gg if ctx.needs[1] else None,
            gb if ctx.needs[2] else None,
        )


@register("softmax")
class Softmax(Function):
    """Softmax over the last axis."""

    @staticmethod
    def forward(ctx, x):
        c = x.shape[-1]
        # the returned array itself is saved so consumers saving it dedupe
        out = kernels.softmax_fwd(x.data.reshape(-1, c)).reshape(x.shape)
        ctx.save(out)
        return out

    @staticmethod
    def backward(ctx, g):
        (out,) = ctx.saved
        c = out.shape[-1]
        return (kernels.softmax_bwd(g.reshape(-1, c), out.reshape(-1, c)).reshape(g.shape),)


@register("log_softmax")
class LogSoftmax(Function):
    @staticmethod
    def forward(ctx, x):
        z = x.data - x.data.max(axis=-1, keepdims=True)
        out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        ctx.save(out)
        return out

    @staticmethod
    def backward(ctx, g):
        (out,) = ctx.saved
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)


# ----------------------------------------------------------------------------
# reductions and layout
# ----------------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


@register("sum")
class Sum(Function):
    @staticmethod
    def forward(ctx, x, axis=None, keepdims=False):
        axes = _norm_axes(axis, x.ndim)
        ctx.attrs.update(shape=x.shape, axes=axes, keepdims=keepdims)
        return x.data.sum(axis=axes, keepdims=keepdims)

    @staticmethod
    def backward(ctx, g):
        a = ctx.attrs
        if not a["keepdims"]:
            g = np.expand_dims(g, a["axes"])
        return (np.broadcast_to(g, a["shape"]).copy(),)


@register("mean")
class Mean(Function):
    @staticmethod
    def forward(ctx, x, axis=None, keepdims=False):
        axes = _norm_axes(axis, x.ndim)
        count = int(np.prod([x.shape[i] for i in axes]))
        ctx.attrs.update(shape=x.shape, axes=axes, keepdims=keepdims, count=count)
        return x.data.mean(axis=axes, keepdims=keepdims)

    @staticmethod
    def backward(ctx, g):
        a = ctx.attrs
        if not a["keepdims"]:
            g = np.expand_dims(g, a["axes"])
        return (np.broadcast_to(g / a["count"], a["shape"]).copy(),)


@register("reshape")
class Reshape(Function):
    @staticmethod
    def forward(ctx, x, shape=None):
        try:
            out = x.data.reshape(shape)
        except ValueError:
            raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None
        ctx.attrs["shape"] = x.shape
        return out

    @staticmethod
    def backward(ctx, g):
        return (g.reshape(ctx.attrs["shape"]),)


@register("permute")
class Permute(Function):
    @staticmethod
    def forward(ctx, x, axes=None):
        axes = tuple(a % x.ndim for a in axes)
        if sorted(axes) != list(range(x.ndim)):
            raise ShapeError(f"permute: {axes} is not a permutation of {x.ndim} axes")
        ctx.attrs["inverse"] = tuple(np.argsort(axes))
        return x.data.transpose(axes)

    @staticmethod
    def backward(ctx, g):
        return (g.transpose(ctx.attrs["inverse"]),)


@register("concat")
class Concat(Function):
    @staticmethod
    def forward(ctx, *xs, axis=0):
        if not xs:
            raise ShapeError("concat: no inputs")
        ax = axis % xs[0].ndim
        ref = xs[0].shape
        for x in xs[1:]:
            if x.ndim != len(ref) or any(
                x.shape[i] != ref[i] for i in range(len(ref)) if i != ax
            ):
                raise ShapeError(f"concat: shapes {ref} and {x.shape} differ off axis {ax}")
        sizes = [x.shape[ax] for x in xs]
        ctx.attrs.update(axis=ax, splits=np.cumsum(sizes)[:-1])
        return np.concatenate([x.data for x in xs], axis=ax)

    @staticmethod
    def backward(ctx, g):
        parts = np.split(g, ctx.attrs["splits"], axis=ctx.attrs["axis"])
        return tuple(p if need else None for p, need in zip(parts, ctx.needs))


@register("pad")
class Pad(Function):
    """Pad with zeros (``mode='constant'``) or by edge replication (``'edge'``)."""

    @staticmethod
    def forward(ctx, x, pads=None, mode="constant"):
        pads = tuple(tuple(int(v) for v in p) for p in pads)
        if len(pads) != x.ndim or any(v < 0 for p in pads for v in p):
            raise ShapeError(f"pad: need {x.ndim} non-negative (before, after) pairs, got {pads}")
        if mode not in ("constant", "edge"):
            raise ShapeError(f"pad: unknown mode {mode!r}")
        ctx.attrs.update(pads=pads, mode=mode, shape=x.shape)
        return np.pad(x.data, pads, mode=mode)

    @staticmethod
    def backward(ctx, g):
        a = ctx.attrs
        edge = a["mode"] == "edge"
        # fold one axis at a time so corner cells reach their source exactly
        for ax, ((lo, hi), n) in enumerate(zip(a["pads"], a["shape"])):
            g = np.moveaxis(g, ax, 0)
            inner = g[lo : lo + n].copy()
            if edge and lo:
                inner[0] += g[:lo].sum(axis=0)
            if edge and hi:
                inner[-1] += g[lo + n :].sum(axis=0)
            g = np.moveaxis(inner, 0, ax)
        return (np.ascontiguousarray(g),)


@register("getitem")
class GetItem(Function):
    """Indexing; integer-array indices may repeat (gradients accumulate)."""

    @staticmethod
    def forward(ctx, x, index=None):
        out = x.data[index]
        if out.size == 0:
            raise ShapeError(f"getitem: index {index!r} selects nothing from {x.shape}")
        ctx.attrs.update(shape=x.shape, index=index)
        return out

    @staticmethod
    def backward(ctx, g):
        gx = np.zeros(ctx.attrs["shape"])
        index = ctx.attrs["index"]
        parts = index if isinstance(index, tuple) else (index,)
        if any(isinstance(i, (np.ndarray, list)) for i in parts):
            np.add.at(gx, index, g)  # repeated advanced indices accumulate
        else:
            gx[index] = g
        return (gx,)


# ----------------------------------------------------------------------------
# functional surface
# ----------------------------------------------------------------------------

def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def add(a, b):
    return Add.apply(_lift(a), _lift(b))


def sub(a, b):
    return Sub.apply(_lift(a), _lift(b))


def mul(a, b):
    if np.isscalar(b):
        return Scale.apply(a, factor=b)
    if np.isscalar(a):
        return Scale.apply(b, factor=a)
    return Mul.apply(_lift(a), _lift(b))


def scale(a, factor):
    return Scale.apply(a, factor=factor)


def matmul(a, b):
    return MatMul.apply(_lift(a), _lift(b))


def gelu(x):
    return Gelu.apply(x)


def conv2d(x, w, b=None, stride=1, padding=0):
    if b is None:
        b = Tensor(np.zeros(w.shape[0]))
    if w.ndim != 4:
        raise ShapeError(f"conv2d: weight must be 4-d, got {w.shape}")
    return Conv.apply(x, w, b, stride=stride, padding=padding)


def conv3d(x, w, b=None, stride=1, padding=0):
    if b is None:
        b = Tensor(np.zeros(w.shape[0]))
    if w.ndim != 5:
        raise ShapeError(f"conv3d: weight must be 5-d, got {w.shape}")
    return Conv.apply(x, w, b, stride=stride, padding=padding)


def max_pool3d(x, kernel=(3, 1, 1)):
    return MaxPool3d.apply(x, kernel=kernel)


def layer_norm(x, gamma, beta, eps=1e-5):
    return LayerNorm.apply(x, gamma, beta, eps=eps)


def softmax(x):
    return Softmax.apply(x)


def log_softmax(x):
    return LogSoftmax.apply(x)


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    return Sum.apply(x, axis=axis, keepdims=keepdims)


def mean(x, axis=None, keepdims=False):
    return Mean.apply(x, axis=axis, keepdims=keepdims)


def reshape(x, shape):
    return Reshape.apply(x, shape=tuple(shape))


def permute(x, axes):
    return Permute.apply(x, axes=tuple(axes))


def concat(xs, axis=0):
    return Concat.apply(*[_lift(x) for x in xs], axis=axis)


def pad(x, pads, mode="constant"):
    return Pad.apply(x, pads=pads, mode=mode)


def getitem(x, index):
    return GetItem.apply(x, index=index)


def linear(x, w, b=None):
    """``x @ w (+ b)`` with ``w`` stored as [in, out]."""
    y = matmul(x, w)
    return y if b is None else add(y, b)


def broadcast_to(x, shape):
    """Differentiable broadcast via addition of a constant zero block."""
    return add(x, Tensor(np.zeros(shape)))


__all__ = [
    "PRIMITIVES",
    "primitive_forward",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "gelu",
    "conv2d",
    "conv3d",
    "max_pool3d",
    "layer_norm",
    "softmax",
    "log_softmax",
    "sum",
    "mean",
    "reshape",
    "permute",
    "concat",
    "pad",
    "getitem",
    "linear",
    "broadcast_to",
    "as_tensor",
]
