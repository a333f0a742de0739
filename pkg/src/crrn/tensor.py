"""Small reverse-mode autodiff over dense numpy arrays.

Values are wrapped in :class:`Tensor`; trainable leaves are
:class:`Parameter`. Operations executed while a :class:`Tape` is active
(``with Tape() as tape:``) and touching at least one tensor that requires
grad are recorded in execution order together with a closure mapping the
output adjoint to input adjoints. ``tape.backward(loss)`` replays the
closures in reverse and accumulates into ``Parameter.grad``.

Outside a tape nothing is recorded, which is what inference uses.

Feature maps are 4-D ``(n, c, h, w)``. Set ``CRRN_DEBUG=1`` to assert that
no op produces a non-finite value.
"""

from __future__ import annotations

import os
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import as_strided

DEBUG = os.environ.get("CRRN_DEBUG", "") not in ("", "0")


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        if self.data.dtype.kind != "f":
            self.data = self.data.astype(np.float64)
        self.requires_grad = requires_grad

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _wrap(other, self))

    def __radd__(self, other):
        return add(_wrap(other, self), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


class Parameter(Tensor):
    __slots__ = ("grad", "name")

    def __init__(self, data, name: str = ""):
        super().__init__(np.array(data, copy=True), requires_grad=True)
        self.grad = np.zeros_like(self.data)
        self.name = name

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def _wrap(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full(like.shape, x, dtype=like.dtype))


def constant(data, dtype=None) -> Tensor:
    arr = np.asarray(data, dtype=dtype) if dtype is not None else np.asarray(data)
    return Tensor(arr)


def zeros(shape, dtype=np.float64) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype))


class _Node:
    __slots__ = ("out", "parents", "vjp")

    def __init__(self, out, parents, vjp):
        self.out = out
        self.parents = parents
        self.vjp = vjp


_TAPES: List["Tape"] = []


class Tape:
    """Records operations in execution order for one backward pass."""

    def __init__(self):
        self.nodes: List[_Node] = []
        self._leaf_grads: Dict[int, np.ndarray] = {}
        self._leaves: Dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(param) into every Parameter reached from ``loss``."""
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        if isinstance(loss, Parameter):
            loss.grad += 1.0
            return
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if isinstance(parent, Parameter):
                    parent.grad += pg
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        # whatever is left belongs to leaf tensors created with requires_grad
        for key, g in grads.items():
            if key in self._leaves:
                prev = self._leaf_grads.get(key)
                self._leaf_grads[key] = g if prev is None else prev + g

    def watch(self, t: Tensor) -> Tensor:
        """Mark a plain tensor as a leaf whose gradient should be kept."""
        t.requires_grad = True
        self._leaves[id(t)] = t
        return t

    def grad(self, t: Tensor) -> np.ndarray:
        return self._leaf_grads.get(id(t), np.zeros_like(t.data))


def backward(tape: Tape, loss: Tensor) -> None:
    tape.backward(loss)


def _active() -> Optional[Tape]:
    return _TAPES[-1] if _TAPES else None


def _emit(data: np.ndarray, parents: Tuple[Tensor, ...], vjp: Callable) -> Tensor:
    if DEBUG and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced")
    tape = _active()
    needs = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.nodes.append(_Node(out, parents, vjp))
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _batch_compatible(a: Tensor, b: Tensor, op: str) -> None:
    # equal shapes, or one side has batch size 1 (per-position weights)
    if a.shape == b.shape:
        return
    if a.ndim == b.ndim == 4 and a.shape[1:] == b.shape[1:] and 1 in (a.shape[0], b.shape[0]):
        return
    raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _sum_to(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    return g.sum(axis=0, keepdims=True)


# ------------------------------------------------------------------ pointwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _batch_compatible(a, b, "add")
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b), lambda g: (_sum_to(g, sa), _sum_to(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _batch_compatible(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b), lambda g: (_sum_to(g, sa), -_sum_to(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product."""
    _batch_compatible(a, b, "hadamard")
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b),
                 lambda g: (_sum_to(g * bd, ad.shape), _sum_to(g * ad, bd.shape)))


hadamard = mul


def scale(a: Tensor, k: float) -> Tensor:
    return _emit(a.data * k, (a,), lambda g: (g * k,))


def sigmoid(a: Tensor) -> Tensor:
    # tanh form is overflow-free for large |x|
    y = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
    return _emit(y, (a,), lambda g: (g * y * (1.0 - y),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _emit(y, (a,), lambda g: (g * (1.0 - y * y),))


def relu(a: Tensor) -> Tensor:
    on = a.data > 0
    return _emit(np.where(on, a.data, 0.0).astype(a.dtype), (a,), lambda g: (g * on,))


def elementwise(op: str, a: Tensor) -> Tensor:
    try:
        fn = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu}[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(a)


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _emit(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def sum_all(a: Tensor) -> Tensor:
    shape, dt = a.shape, a.dtype
    return _emit(np.asarray(a.data.sum(), dtype=dt), (a,),
                 lambda g: (np.broadcast_to(g, shape).astype(dt),))


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.data.size)


# ------------------------------------------------------------------ structure

def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = tuple(tensors)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != axis):
            raise ShapeError(f"concat along {axis}: incompatible shapes {ref} vs {t.shape}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return _emit(np.concatenate([t.data for t in tensors], axis=axis), tensors, vjp)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 4 or b.ndim != 4 or (a.shape[0], *a.shape[2:]) != (b.shape[0], *b.shape[2:]):
        raise ShapeError(f"concat_channels: shape mismatch {a.shape} vs {b.shape}")
    return concat((a, b), axis=1)


def slice_channels(a: Tensor, start: int, stop: int) -> Tensor:
    shape, dt = a.shape, a.dtype

    def vjp(g):
        full = np.zeros(shape, dtype=dt)
        full[:, start:stop] = g
        return (full,)

    return _emit(a.data[:, start:stop].copy(), (a,), vjp)


def split_channels(a: Tensor, parts: int) -> List[Tensor]:
    c = a.shape[1]
    if c % parts:
        raise ShapeError(f"cannot split {c} channels into {parts}")
    k = c // parts
    return [slice_channels(a, i * k, (i + 1) * k) for i in range(parts)]


def repeat_channels(a: Tensor, c: int) -> Tensor:
    """(n, 1, h, w) -> (n, c, h, w) by copying the single channel."""
    if a.ndim != 4 or a.shape[1] != 1:
        raise ShapeError(f"repeat_channels expects one channel, got {a.shape}")
    return _emit(np.repeat(a.data, c, axis=1), (a,), lambda g: (g.sum(axis=1, keepdims=True),))


# ---------------------------------------------------------------- convolution

def _conv_out(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _windows(xp: np.ndarray, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """Strided view (n, oh, ow, c, k, k) of a padded input."""
    n, c, _, _ = xp.shape
    sn, sc, sh, sw = xp.strides
    return as_strided(xp, (n, oh, ow, c, k, k), (sn, sh * stride, sw * stride, sc, sh, sw),
                      writeable=False)


def _im2col(xp, k, stride, oh, ow) -> np.ndarray:
    n, c = xp.shape[:2]
    return _windows(xp, k, stride, oh, ow).reshape(n * oh * ow, c * k * k)


def _col2im(cols: np.ndarray, shape, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add (n*oh*ow, c*k*k) back onto ``shape``."""
    n, c, H, W = shape
    out = np.zeros(shape, dtype=cols.dtype)
    cols = cols.reshape(n, oh, ow, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    he, we = stride * (oh - 1) + 1, stride * (ow - 1) + 1
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + he:stride, j:j + we:stride] += cols[:, :, i, j]
    return out


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (n, c_in, h, w) with (c_out, c_in, k, k), zero padding."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, ci, h, w = x.shape
    co, wci, kh, kw = weight.shape
    if wci != ci or kh != kw:
        raise ShapeError(f"conv2d: input {x.shape} does not match weight {weight.shape}")
    if bias is not None and bias.shape != (co,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match {co} output channels")
    k = kh
    oh, ow = _conv_out(h, k, stride, padding), _conv_out(w, k, stride, padding)
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv2d: output size {oh}x{ow} from input {x.shape}, k={k}")
    xp = _pad(x.data, padding)
    cols = _im2col(xp, k, stride, oh, ow)
    wmat = weight.data.reshape(co, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, oh, ow, co).transpose(0, 3, 1, 2))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def vjp(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, co)
        gw = (gm.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad and stride == 1 and padding <= k - 1:
            # full correlation of g with the flipped kernel; one matmul, no scatter
            q = k - 1 - padding
            gcols = _im2col(_pad(g, q), k, 1, h, w)
            wflip = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(ci, -1)
            gx = np.ascontiguousarray((gcols @ wflip.T).reshape(n, h, w, ci).transpose(0, 3, 1, 2))
        elif x.requires_grad:
            gxp = _col2im(gm @ wmat, xp.shape, k, stride, oh, ow)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _emit(out, parents, vjp)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
                     stride: int = 1, padding: int = 0, output_padding: int = 0) -> Tensor:
    """Transposed convolution; weight is (c_in, c_out, k, k).

    Output size is ``(h - 1) * stride - 2 * padding + k + output_padding``.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv_transpose2d expects 4-D tensors, got {x.shape} and {weight.shape}")
    n, ci, h, w = x.shape
    wci, co, kh, kw = weight.shape
    if wci != ci or kh != kw:
        raise ShapeError(f"conv_transpose2d: input {x.shape} does not match weight {weight.shape}")
    if bias is not None and bias.shape != (co,):
        raise ShapeError(f"conv_transpose2d: bias {bias.shape} does not match {co} channels")
    if not 0 <= output_padding < max(stride, 1) and output_padding != 0:
        raise ValueError("output_padding must be smaller than stride")
    k = kh
    oh = (h - 1) * stride - 2 * padding + k + output_padding
    ow = (w - 1) * stride - 2 * padding + k + output_padding
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv_transpose2d: output size {oh}x{ow} from input {x.shape}")
    # full (uncropped) canvas large enough for every stamp and the requested crop
    Hb = max((h - 1) * stride + k, padding + oh)
    Wb = max((w - 1) * stride + k, padding + ow)
    xm = x.data.transpose(0, 2, 3, 1).reshape(-1, ci)
    wmat = weight.data.reshape(ci, -1)
    canvas = _col2im(xm @ wmat, (n, co, Hb, Wb), k, stride, h, w)
    out = canvas[:, :, padding:padding + oh, padding:padding + ow]
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def vjp(g):
        gc = np.zeros((n, co, Hb, Wb), dtype=g.dtype)
        gc[:, :, padding:padding + oh, padding:padding + ow] = g
        cols = _im2col(gc, k, stride, h, w)
        gx = None
        if x.requires_grad:
            gx = np.ascontiguousarray((cols @ wmat.T).reshape(n, h, w, ci).transpose(0, 3, 1, 2))
        gw = (xm.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _emit(out, parents, vjp)


def conv1x1(x: Tensor, weight: Tensor) -> Tensor:
    """Per-pixel channel mixing with a (c_out, c_in, 1, 1) kernel, no bias."""
    if x.ndim != 4 or weight.ndim != 4 or weight.shape[2:] != (1, 1):
        raise ShapeError(f"conv1x1 expects a (c_out, c_in, 1, 1) kernel, got {weight.shape}")
    co, ci = weight.shape[:2]
    if x.shape[1] != ci:
        raise ShapeError(f"conv1x1: input has {x.shape[1]} channels, kernel expects {ci}")
    w2 = weight.data[:, :, 0, 0]
    xd = x.data
    out = np.einsum("oc,nchw->nohw", w2, xd, optimize=True)

    def vjp(g):
        gx = np.einsum("oc,nohw->nchw", w2, g, optimize=True) if x.requires_grad else None
        gw = None
        if weight.requires_grad:
            gw = np.einsum("nohw,nchw->oc", g, xd, optimize=True)[:, :, None, None]
        return gx, gw

    return _emit(out, (x, weight), vjp)


# ---------------------------------------------------------------- batch norm

class UninitializedStatsError(RuntimeError):
    pass


class RunningStats:
    """Per-channel running mean/variance for batch norm."""

    def __init__(self, channels: int, momentum: float = 0.1, dtype=np.float64):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.initialized = False

    def update(self, mean: np.ndarray, var_unbiased: np.ndarray) -> None:
        m = self.momentum
        if not self.initialized:
            # first batch seeds the estimate instead of blending with defaults
            self.mean = mean.astype(self.mean.dtype).copy()
            self.var = var_unbiased.astype(self.var.dtype).copy()
            self.initialized = True
            return
        self.mean = (1 - m) * self.mean + m * mean
        self.var = (1 - m) * self.var + m * var_unbiased


BN_EPS = 1e-5


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, stats: Optional[RunningStats],
               training: bool = True, eps: float = BN_EPS) -> Tensor:
    """Per-channel normalization over (n, h, w)."""
    if x.ndim != 4:
        raise ShapeError(f"batch_norm expects (n, c, h, w), got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: gamma {gamma.shape} / beta {beta.shape} vs {c} channels")
    xd = x.data
    gd = gamma.data[None, :, None, None]
    bd = beta.data[None, :, None, None]
    if training:
        axes = (0, 2, 3)
        count = xd.size // c
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        if stats is not None:
            unbiased = var * count / max(count - 1, 1)
            stats.update(mu, unbiased)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (xd - mu[None, :, None, None]) * inv[None, :, None, None]
        out = gd * xhat + bd

        def vjp(g):
            gb = g.sum(axis=axes)
            gg = (g * xhat).sum(axis=axes)
            dxhat = g * gd
            gx = (inv[None, :, None, None] / count) * (
                count * dxhat - dxhat.sum(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
            return gx, gg, gb

        return _emit(out.astype(xd.dtype, copy=False), (x, gamma, beta), vjp)

    if stats is None or not stats.initialized:
        raise UninitializedStatsError("batch_norm in eval mode before any training step")
    inv = 1.0 / np.sqrt(stats.var + eps)
    xhat = (xd - stats.mean[None, :, None, None]) * inv[None, :, None, None]
    out = gd * xhat + bd

    def vjp_eval(g):
        return (g * gd * inv[None, :, None, None], (g * xhat).sum(axis=(0, 2, 3)),
                g.sum(axis=(0, 2, 3)))

    return _emit(out.astype(xd.dtype, copy=False), (x, gamma, beta), vjp_eval)


# ------------------------------------------------------------------ init

def uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype=np.float64) -> np.ndarray:
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)
