"""Dense tensors, numeric kernels and tape-based reverse-mode autodiff.

Layout is row-major and channel-first: feature maps are ``(C, H, W)`` or,
batched, ``(B, C, H, W)``.  Kernels run on numpy arrays; a kernel records a
node on the active :class:`ComputationRecord` only when one of its inputs
requires a gradient, so inference outside a record carries no graph cost.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised when a kernel would produce NaN or Inf from finite inputs."""


class Tensor:
    """A numpy buffer plus the bookkeeping autodiff needs."""

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in DTYPES:
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data = arr if arr.flags.c_contiguous else arr.copy()
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other, self.dtype), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, index):
        return slice_(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a: int, b: int):
        return swapaxes(self, a, b)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or np.float64))


def tensor(data, dtype=np.float32, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=requires_grad, name=name)


# ---------------------------------------------------------------------------
# Recording
# ---------------------------------------------------------------------------


class _Node:
    __slots__ = ("op", "inputs", "output", "vjp")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], output: Tensor, vjp: Callable):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


_ACTIVE: list["ComputationRecord"] = []


class ComputationRecord:
    """Append-only log of executed kernels plus a registry of trainable leaves.

    Use as a context manager; kernels executed inside the ``with`` block whose
    inputs need gradients are appended in execution order, which is already a
    topological order.
    """

    def __init__(self, parameters: Mapping[str, Tensor] | None = None):
        self.nodes: list[_Node] = []
        self.parameters: dict[str, Tensor] = {}
        if parameters:
            for name, p in parameters.items():
                self.register(name, p)

    def register(self, name: str, t: Tensor) -> Tensor:
        t.requires_grad = True
        self.parameters[name] = t
        return t

    def __enter__(self) -> "ComputationRecord":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        return backward(loss, self)


def active_record() -> ComputationRecord | None:
    return _ACTIVE[-1] if _ACTIVE else None


def _record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, vjp: Callable) -> Tensor:
    if not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    rec = active_record()
    needs = rec is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        rec.nodes.append(_Node(op, tuple(inputs), out, vjp))
    return out


def backward(loss: Tensor, record: ComputationRecord) -> dict[str, np.ndarray]:
    """Reverse-mode sweep over ``record``; returns one gradient per registered leaf.

    Leaves not reachable from ``loss`` receive zeros.  Gradients are computed
    afresh on every call (``.grad`` is overwritten, never accumulated), so
    repeating the call yields identical results.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(record.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.vjp(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    out: dict[str, np.ndarray] = {}
    for name, p in record.parameters.items():
        g = grads.get(id(p))
        g = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=p.dtype).reshape(p.shape)
        p.grad = g
        out[name] = g
    return out


def grad_of(loss: Tensor, record: ComputationRecord, leaves: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of ``loss`` with respect to arbitrary leaves (not only registered ones)."""
    tmp = ComputationRecord()
    tmp.nodes = record.nodes
    leaves = list(leaves)
    for i, t in enumerate(leaves):
        tmp.parameters[f"_{i}"] = t
    g = backward(loss, tmp)
    return [g[f"_{i}"] for i in range(len(leaves))]


def _check_dtype(*ts: Tensor) -> None:
    dts = {t.dtype for t in ts}
    if len(dts) > 1:
        raise TypeError(f"mixed dtypes: {sorted(str(d) for d in dts)}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise and shape kernels
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, a.dtype)
    _check_dtype(a, b)
    try:
        out = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: cannot broadcast {a.shape} and {b.shape}") from e
    sa, sb = a.shape, b.shape
    return _record("add", (a, b), out, lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_dtype(a, b)
    try:
        out = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"mul: cannot broadcast {a.shape} and {b.shape}") from e
    ad, bd = a.data, b.data
    return _record("mul", (a, b), out,
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record("scale", (x,), x.data * x.dtype.type(c), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record("relu", (x,), np.where(mask, x.data, 0).astype(x.dtype), lambda g: (g * mask,))


def reduce_sum(x: Tensor, axes=None) -> Tensor:
    shape = x.shape
    if axes is None:
        axes = tuple(range(x.ndim))
    elif isinstance(axes, int):
        axes = (axes,)
    axes = tuple(a % x.ndim for a in axes)
    out = x.data.sum(axis=axes)

    def vjp(g):
        g = np.asarray(g)
        for a in sorted(axes):
            g = np.expand_dims(g, a)
        return (np.broadcast_to(g, shape).copy(),)

    return _record("reduce_sum", (x,), np.asarray(out, dtype=x.dtype), vjp)


def mean(x: Tensor) -> Tensor:
    return scale(reduce_sum(x), 1.0 / x.data.size)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: {old} -> {tuple(shape)}") from e
    return _record("reshape", (x,), out, lambda g: (g.reshape(old),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    return _record("swapaxes", (x,), np.ascontiguousarray(np.swapaxes(x.data, a, b)),
                   lambda g: (np.swapaxes(g, a, b),))


def slice_(x: Tensor, index) -> Tensor:
    shape, dtype = x.shape, x.dtype

    def vjp(g):
        full = np.zeros(shape, dtype=dtype)
        if _fancy(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _record("slice", (x,), np.array(x.data[index], copy=True), vjp)


def _fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def flip_w(x: Tensor) -> Tensor:
    """Horizontal flip (last axis)."""
    return _record("flip_w", (x,), np.ascontiguousarray(x.data[..., ::-1]), lambda g: (g[..., ::-1],))


def divide_rows(v: Tensor, d: Tensor, eps: float = 1e-6) -> Tensor:
    """Divide each row ``v[..., i, :]`` by ``max(d[..., i], eps)``."""
    _check_dtype(v, d)
    if v.shape[:-1] != d.shape:
        raise ShapeError(f"divide_rows: need one denominator per row, got v{v.shape} d{d.shape}")
    dd = d.data
    clamped = np.maximum(dd, eps)
    active = dd > eps
    out = v.data / clamped[..., None]
    vd = v.data

    def vjp(g):
        gv = g / clamped[..., None]
        gd = -(g * vd).sum(axis=-1) / (clamped * clamped)
        return gv, np.where(active, gd, 0).astype(dd.dtype)

    return _record("divide_rows", (v, d), out, vjp)


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(..., m, k) @ (..., k, n) with identical leading (batch) dimensions."""
    _check_dtype(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)
    return _record("matmul", (a, b), out,
                   lambda g: (np.matmul(g, np.swapaxes(bd, -1, -2)), np.matmul(np.swapaxes(ad, -1, -2), g)))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Apply ``w`` (out, in) to the last axis of ``x``, plus optional bias."""
    inputs = (x, w) if b is None else (x, w, b)
    _check_dtype(*inputs)
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} vs weight {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd.T
    if b is not None:
        out = out + b.data

    def vjp(g):
        gx = g @ wd
        g2, x2 = g.reshape(-1, g.shape[-1]), xd.reshape(-1, xd.shape[-1])
        gw = g2.T @ x2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _record("linear", inputs, out, vjp)


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------


def _batched(x: Tensor) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise ShapeError(f"expected (C,H,W) or (B,C,H,W), got {x.shape}")


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, padding: int | None = None,
           dilation: int = 1, stride: int = 1) -> Tensor:
    """Dilated 2-D cross-correlation for 1x1 and 3x3 kernels.

    ``padding`` defaults to ``dilation`` for 3x3 kernels and 0 for 1x1, which
    preserves spatial size at stride 1.
    """
    inputs = (x, w) if bias is None else (x, w, bias)
    _check_dtype(*inputs)
    co, ci, kh, kw = w.shape
    if kh != kw or kh not in (1, 3):
        raise ValueError(f"conv2d: unsupported kernel size {kh}x{kw}")
    xb, squeeze = _batched(x)
    B, C, H, W = xb.shape
    if C != ci:
        raise ShapeError(f"conv2d: input has {C} channels, weight expects {ci}")
    if padding is None:
        padding = dilation if kh == 3 else 0
    p, d, s = padding, dilation, stride
    Ho = (H + 2 * p - d * (kh - 1) - 1) // s + 1
    Wo = (W + 2 * p - d * (kw - 1) - 1) // s + 1
    w2 = w.data.reshape(co, -1)

    if kh == 1 and p == 0 and s == 1:
        cols = xb.reshape(B, C, H * W)
        out = np.matmul(w2, cols)
    else:
        xp = np.pad(xb, ((0, 0), (0, 0), (p, p), (p, p))) if p else xb
        cols = np.empty((B, C, kh * kw, Ho, Wo), dtype=xb.dtype)
        for i in range(kh):
            for j in range(kw):
                cols[:, :, i * kw + j] = xp[:, :, i * d: i * d + s * (Ho - 1) + 1: s,
                                            j * d: j * d + s * (Wo - 1) + 1: s]
        cols = cols.reshape(B, C * kh * kw, Ho * Wo)
        out = np.matmul(w2, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(B, co, Ho, Wo)
    if squeeze:
        out = out[0]

    def vjp(g):
        gb = g[None] if squeeze else g
        g3 = gb.reshape(B, co, Ho * Wo)
        gw = np.tensordot(g3, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
        gcols = np.matmul(w2.T, g3)
        if kh == 1 and p == 0 and s == 1:
            gx = gcols.reshape(B, C, H, W)
        else:
            gcols = gcols.reshape(B, C, kh * kw, Ho, Wo)
            gxp = np.zeros((B, C, H + 2 * p, W + 2 * p), dtype=xb.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i * d: i * d + s * (Ho - 1) + 1: s,
                        j * d: j * d + s * (Wo - 1) + 1: s] += gcols[:, :, i * kw + j]
            gx = gxp[:, :, p: p + H, p: p + W] if p else gxp
        if squeeze:
            gx = gx[0]
        if bias is None:
            return gx, gw
        return gx, gw, g3.sum(axis=(0, 2))

    return _record("conv2d", inputs, out, vjp)


# ---------------------------------------------------------------------------
# Channel-wise kernels
# ---------------------------------------------------------------------------


def softmax_channels(x: Tensor) -> Tensor:
    """Softmax over the channel axis (axis -3) with max subtraction."""
    if x.ndim < 3 or x.shape[-3] < 1:
        raise ShapeError(f"softmax_channels: expected (..., K, H, W), got {x.shape}")
    z = x.data - x.data.max(axis=-3, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-3, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-3, keepdims=True)),)

    return _record("softmax_channels", (x,), y, vjp)


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    xs = list(xs)
    if not xs:
        raise ShapeError("concat_channels: empty input list")
    _check_dtype(*xs)
    lead, spatial = xs[0].shape[:-3], xs[0].shape[-2:]
    for t in xs:
        if t.shape[-2:] != spatial or t.shape[:-3] != lead:
            raise ShapeError(f"concat_channels: spatial mismatch {xs[0].shape} vs {t.shape}")
    out = np.concatenate([t.data for t in xs], axis=-3)
    bounds = np.cumsum([0] + [t.shape[-3] for t in xs])

    def vjp(g):
        return tuple(g[..., bounds[i]:bounds[i + 1], :, :] for i in range(len(xs)))

    return _record("concat_channels", xs, out, vjp)


def _interp_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    """Row ``o`` holds the align-corners-false linear weights for output ``o``."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    sc = n_in / n_out
    for o in range(n_out):
        src = max((o + 0.5) * sc - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        m[o, i0] += 1.0 - lam
        m[o, i1] += lam
    return m


def bilinear_resize(x: Tensor, h2: int, w2: int) -> Tensor:
    """Bilinear resampling of the last two axes, align_corners=False."""
    if h2 < 1 or w2 < 1:
        raise ValueError(f"bilinear_resize: target size must be positive, got {h2}x{w2}")
    H, W = x.shape[-2:]
    if (H, W) == (h2, w2):
        return _record("bilinear_resize", (x,), x.data.copy(), lambda g: (g,))
    rh = _interp_matrix(H, h2, x.dtype)
    rw = _interp_matrix(W, w2, x.dtype)
    out = np.matmul(np.matmul(rh, x.data), rw.T)
    return _record("bilinear_resize", (x,), out, lambda g: (np.matmul(np.matmul(rh.T, g), rw),))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = BN_MOMENTUM,
               eps: float = BN_EPS) -> Tensor:
    """Per-channel normalisation over every axis except the channel axis (-3).

    In training mode the batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place (unbiased variance, like most
    frameworks).  In eval mode the running statistics are used.
    """
    _check_dtype(x, gamma, beta)
    C = x.shape[-3]
    axes = tuple(i for i in range(x.ndim) if i != x.ndim - 3)
    bshape = (C, 1, 1)
    if training:
        n = x.data.size // C
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        unbiased = var * n / max(n - 1, 1)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * unbiased
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu.reshape(bshape)) * inv.reshape(bshape)
        out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
        gd = gamma.data

        def vjp(g):
            gbeta = g.sum(axis=axes)
            ggamma = (g * xhat).sum(axis=axes)
            gx_hat = g * gd.reshape(bshape)
            gx = (inv.reshape(bshape) / n) * (
                n * gx_hat - gx_hat.sum(axis=axes).reshape(bshape)
                - xhat * (gx_hat * xhat).sum(axis=axes).reshape(bshape))
            return gx, ggamma, gbeta
    else:
        inv = (1.0 / np.sqrt(running_var + eps)).astype(x.dtype)
        xhat = (x.data - running_mean.reshape(bshape).astype(x.dtype)) * inv.reshape(bshape)
        out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
        gd = gamma.data

        def vjp(g):
            return (g * (gd * inv).reshape(bshape), (g * xhat).sum(axis=axes), g.sum(axis=axes))

    return _record("batch_norm", (x, gamma, beta), out.astype(x.dtype), vjp)


def cross_entropy(logits: Tensor, labels: np.ndarray, ignore_index: int = 255) -> Tensor:
    """Mean negative log-likelihood over non-ignored pixels.

    ``logits`` is (K, H, W) or (B, K, H, W); ``labels`` matches without the
    class axis.
    """
    K = logits.shape[-3]
    labels = np.asarray(labels)
    if labels.shape != logits.shape[:-3] + logits.shape[-2:]:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    valid = labels != ignore_index
    bad = valid & ((labels < 0) | (labels >= K))
    if bad.any():
        raise ValueError(f"cross_entropy: label values {sorted(set(labels[bad].tolist()))} "
                         f"outside [0, {K}) and not ignore_index={ignore_index}")
    n = int(valid.sum())
    if n == 0:
        raise ValueError("cross_entropy: every pixel is ignored")
    z = logits.data - logits.data.max(axis=-3, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-3, keepdims=True))
    logp = z - lse
    safe = np.where(valid, labels, 0)
    picked = np.take_along_axis(logp, np.expand_dims(safe, -3), axis=-3)[..., 0, :, :]
    loss = -(picked * valid).sum() / n

    def vjp(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, np.expand_dims(safe, -3), 1.0, axis=-3)
        return ((p - onehot) * np.expand_dims(valid, -3) * (g / n),)

    return _record("cross_entropy", (logits,), np.asarray(loss, dtype=logits.dtype), vjp)


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------


def finite_difference_grad(f: Callable[[Tensor], Tensor | float], x: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` with respect to every element of ``x``."""
    flat = x.data.reshape(-1)
    grad = np.zeros(flat.size, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = _scalar(f(x))
        flat[i] = orig - eps
        fm = _scalar(f(x))
        flat[i] = orig
        grad[i] = (fp - fm) / (2 * eps)
    return grad.reshape(x.shape)


def _scalar(v) -> float:
    if isinstance(v, Tensor):
        return float(v.data.sum())
    return float(v)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max absolute difference normalised by the larger gradient magnitude."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / denom)
