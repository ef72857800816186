"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation records its parents and a closure that maps the output
gradient to per-parent gradients.  `backward` replays the recorded
closures in exact reverse creation order, which is a valid topological
order because an op's inputs always exist before its output.

Scope is deliberately small: the only broadcasting is a bias add over
the leading batch dimension, everything is float64, and any non-finite
value produced by a forward op raises immediately.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "NonFiniteError",
    "full",
    "uniform",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "add_scalar",
    "matmul",
    "transpose",
    "reshape",
    "relu",
    "conv2d",
    "batch_norm2d",
    "global_avg_pool",
    "add_bias",
    "sum_all",
    "mean_all",
    "logsumexp_rows",
    "gather_rows",
    "replace_at",
    "clamp",
    "cos",
    "arccos",
    "row_norms",
    "l2_normalize_rows",
    "backward",
    "grad_check",
]

_seq_counter = itertools.count()


class NonFiniteError(ArithmeticError):
    """A forward op produced NaN or Inf."""


class Tensor:
    """A float64 array plus an optional gradient buffer.

    Tensors created by ops carry the recorded parents/closure; leaf
    tensors created directly carry none.  ``requires_grad`` marks leaf
    parameters whose gradients should be retained by ``backward``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd", "_traced", "_seq")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor holds NaN/Inf values")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._bwd: Callable[[np.ndarray], tuple[np.ndarray, ...]] | None = None
        self._traced = requires_grad
        self._seq = next(_seq_counter)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars go through scale/add_scalar
    def __add__(self, other):
        return add_scalar(self, other) if isinstance(other, (int, float)) else add(self, other)

    def __sub__(self, other):
        return add_scalar(self, -other) if isinstance(other, (int, float)) else sub(self, other)

    def __mul__(self, other):
        return scale(self, other) if isinstance(other, (int, float)) else mul(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __truediv__(self, other):
        return scale(self, 1.0 / other) if isinstance(other, (int, float)) else div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _result(data: np.ndarray, parents: Sequence[Tensor], bwd) -> Tensor:
    out = Tensor(data)
    if any(p._traced for p in parents):
        out._parents = tuple(parents)
        out._bwd = bwd
        out._traced = True
    return out


# ---------------------------------------------------------------------------
# creation

def _check_shape(shape) -> tuple[int, ...]:
    shape = tuple(int(d) for d in shape)
    if len(shape) == 0:
        raise ValueError("tensor shape must have at least one dimension")
    if any(d < 1 for d in shape):
        raise ValueError(f"tensor dimensions must be >= 1, got {shape}")
    return shape


def full(shape, fill: float, requires_grad: bool = False) -> Tensor:
    """Constant-filled tensor."""
    return Tensor(np.full(_check_shape(shape), float(fill)), requires_grad=requires_grad)


def uniform(shape, lo: float, hi: float, rng, requires_grad: bool = False) -> Tensor:
    """Uniform random tensor; `rng` is an int seed or a numpy Generator."""
    shape = _check_shape(shape)
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# elementwise

def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "div")
    out = a.data / b.data
    return _result(out, (a, b), lambda g: (g / b.data, -g * a.data / (b.data * b.data)))


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data + c, (a,), lambda g: (g,))


def relu(a: Tensor) -> Tensor:
    # subgradient at 0 is 0: mask is strict
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip into [lo, hi]; gradient passes where lo <= x <= hi."""
    mask = (a.data >= lo) & (a.data <= hi)
    return _result(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,))


def cos(a: Tensor) -> Tensor:
    return _result(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),))


def arccos(a: Tensor) -> Tensor:
    """Elementwise arccos; inputs must already be clamped inside (-1, 1)."""
    x = a.data
    return _result(np.arccos(x), (a,), lambda g: (-g / np.sqrt(1.0 - x * x),))


# ---------------------------------------------------------------------------
# linear algebra / structure

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-D tensors")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner dimensions disagree {a.shape} x {b.shape}")

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return _result(a.data @ b.data, (a, b), bwd)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ValueError("transpose expects a 2-D tensor")
    return _result(np.ascontiguousarray(a.data.T), (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(d) for d in shape)
    orig = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x[N, K] + b[K]: the one sanctioned broadcast (over the batch dim)."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ValueError(f"add_bias: incompatible shapes {x.shape} and {b.shape}")
    return _result(x.data + b.data[None, :], (x, b), lambda g: (g, g.sum(axis=0)))


def sum_all(a: Tensor) -> Tensor:
    return _result(np.array([a.data.sum()]), (a,), lambda g: (np.full(a.shape, g.reshape(-1)[0]),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    return _result(
        np.array([a.data.mean()]), (a,), lambda g: (np.full(a.shape, g.reshape(-1)[0] / n),)
    )


def logsumexp_rows(a: Tensor) -> Tensor:
    """Row-wise log(sum(exp(x))) with max subtraction; gradient is softmax."""
    if a.data.ndim != 2:
        raise ValueError("logsumexp_rows expects a 2-D tensor")
    m = a.data.max(axis=1, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=1, keepdims=True)
    out = (m + np.log(s)).reshape(-1)
    soft = e / s
    return _result(out, (a,), lambda g: (soft * g[:, None],))


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """out[i] = a[i, idx[i]]."""
    if a.data.ndim != 2:
        raise ValueError("gather_rows expects a 2-D tensor")
    idx = np.asarray(idx, dtype=np.int64)
    n = a.shape[0]
    if idx.shape != (n,):
        raise ValueError(f"gather_rows: index shape {idx.shape} does not match {n} rows")
    if idx.min() < 0 or idx.max() >= a.shape[1]:
        raise ValueError("gather_rows: index out of range")
    rows = np.arange(n)

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (rows, idx), g)
        return (ga,)

    return _result(a.data[rows, idx], (a,), bwd)


def replace_at(a: Tensor, idx: np.ndarray, values: Tensor) -> Tensor:
    """Copy of a with a[i, idx[i]] replaced by values[i]."""
    if a.data.ndim != 2 or values.data.ndim != 1:
        raise ValueError("replace_at expects a 2-D matrix and a 1-D value vector")
    idx = np.asarray(idx, dtype=np.int64)
    n = a.shape[0]
    if idx.shape != (n,) or values.shape != (n,):
        raise ValueError("replace_at: index/value length must equal the row count")
    rows = np.arange(n)
    out = a.data.copy()
    out[rows, idx] = values.data

    def bwd(g):
        ga = g.copy()
        ga[rows, idx] = 0.0
        return ga, g[rows, idx]

    return _result(out, (a, values), bwd)


def row_norms(a: Tensor) -> Tensor:
    """Euclidean norm of each row of a 2-D tensor."""
    if a.data.ndim != 2:
        raise ValueError("row_norms expects a 2-D tensor")
    n = np.sqrt((a.data * a.data).sum(axis=1))

    def bwd(g):
        return (a.data * (g / n)[:, None],)

    return _result(n, (a,), bwd)


def l2_normalize_rows(a: Tensor) -> Tensor:
    """Rows rescaled to unit Euclidean norm."""
    if a.data.ndim != 2:
        raise ValueError("l2_normalize_rows expects a 2-D tensor")
    n = np.sqrt((a.data * a.data).sum(axis=1, keepdims=True))
    y = a.data / n

    def bwd(g):
        dot = (g * a.data).sum(axis=1, keepdims=True)
        return (g / n - a.data * (dot / n**3),)

    return _result(y, (a,), bwd)


# ---------------------------------------------------------------------------
# convolution / pooling / normalization

def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x[N,C,H,W] with kernels[F,C,kh,kw], zero padding."""
    if x.data.ndim != 4 or kernels.data.ndim != 4:
        raise ValueError("conv2d expects 4-D input and kernels")
    stride = int(stride)
    padding = int(padding)
    if stride < 1 or padding < 0:
        raise ValueError("conv2d: stride must be >= 1 and padding >= 0")
    n, c, h, w = x.shape
    f, ck, kh, kw = kernels.shape
    if ck != c:
        raise ValueError(f"conv2d: channel mismatch input {c} vs kernel {ck}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ValueError("conv2d: kernel larger than padded input")
    hout = (h + 2 * padding - kh) // stride + 1
    wout = (w + 2 * padding - kw) // stride + 1

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    # patch tensor [N, C, kh, kw, hout, wout] via strided slicing
    cols = np.empty((n, c, kh, kw, hout, wout), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * hout : stride, j : j + stride * wout : stride]
    out = np.tensordot(cols, kernels.data, axes=([1, 2, 3], [1, 2, 3]))  # [N,hout,wout,F]
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def bwd(g):
        gk = np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5]))  # [F,C,kh,kw]
        gcols = np.tensordot(g, kernels.data, axes=([1], [0]))  # [N,hout,wout,C,kh,kw]
        gcols = gcols.transpose(0, 3, 4, 5, 1, 2)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * hout : stride, j : j + stride * wout : stride] += gcols[
                    :, :, i, j
                ]
        gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return gx, gk

    return _result(out, (x, kernels), bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial dims: [N,C,H,W] -> [N,C]."""
    if x.data.ndim != 4:
        raise ValueError("global_avg_pool expects a 4-D tensor")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def bwd(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),)

    return _result(out, (x,), bwd)


def batch_norm2d(
    x: Tensor,
    scale_t: Tensor,
    shift_t: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    eps: float = 1e-5,
    momentum: float = 0.1,
    training: bool = True,
) -> Tensor:
    """Per-channel standardization of x[N,C,H,W].

    Train mode uses biased batch statistics and folds them into the
    running buffers (in place, momentum-weighted); eval mode reads the
    running buffers.  eps keeps a constant channel from dividing by zero.
    """
    if x.data.ndim != 4:
        raise ValueError("batch_norm2d expects a 4-D tensor")
    n, c, h, w = x.shape
    if scale_t.shape != (c,) or shift_t.shape != (c,):
        raise ValueError("batch_norm2d: scale/shift must have shape [C]")

    if training:
        m = n * h * w
        if m < 2:
            raise ValueError("batch_norm2d: train mode needs N*H*W >= 2")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mean = running_mean
        var = running_var

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = xhat * scale_t.data[None, :, None, None] + shift_t.data[None, :, None, None]

    if training:

        def bwd(g):
            m = n * h * w
            gshift = g.sum(axis=(0, 2, 3))
            gscale = (g * xhat).sum(axis=(0, 2, 3))
            gxh = g * scale_t.data[None, :, None, None]
            mean_g = gxh.mean(axis=(0, 2, 3))
            mean_gx = (gxh * xhat).mean(axis=(0, 2, 3))
            gx = (
                gxh - mean_g[None, :, None, None] - xhat * mean_gx[None, :, None, None]
            ) * inv_std[None, :, None, None]
            return gx, gscale, gshift

    else:

        def bwd(g):
            gshift = g.sum(axis=(0, 2, 3))
            gscale = (g * xhat).sum(axis=(0, 2, 3))
            gx = g * (scale_t.data * inv_std)[None, :, None, None]
            return gx, gscale, gshift

    return _result(out, (x, scale_t, shift_t), bwd)


# ---------------------------------------------------------------------------
# reverse pass

def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every requires_grad leaf.

    Repeated calls without zeroing add up.  Closures run in exact
    reverse creation order, so the pass is bitwise reproducible.
    """
    if loss.data.size != 1:
        raise ValueError("backward requires a scalar loss")
    if not loss._traced:
        raise ValueError("loss does not depend on any requires_grad tensor")

    # reachable subgraph, then reverse recording order
    nodes: list[Tensor] = []
    seen: set[int] = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(p for p in t._parents if p._traced)
    nodes.sort(key=lambda t: t._seq, reverse=True)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in nodes:
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
        if node._bwd is None:
            continue
        for parent, pg in zip(node._parents, node._bwd(g)):
            if not parent._traced:
                continue
            acc = grads.get(id(parent))
            if acc is None:
                grads[id(parent)] = pg.astype(np.float64, copy=True)
            else:
                acc += pg


# ---------------------------------------------------------------------------
# finite-difference oracle

def grad_check(f, params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Max relative error of analytic vs central-difference gradients.

    `f` must be a deterministic zero-argument callable returning a
    scalar Tensor built from `params`.  Relative error per coordinate is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-12).
    """
    if eps <= 0:
        raise ValueError("grad_check: eps must be positive")
    base = float(f().data.reshape(-1)[0])
    if float(f().data.reshape(-1)[0]) != base:
        raise RuntimeError("grad_check: f is not deterministic")

    for p in params:
        p.zero_grad()
    loss = f()
    backward(loss)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f().data.reshape(-1)[0])
            flat[i] = orig - eps
            fm = float(f().data.reshape(-1)[0])
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * eps)
            err = abs(gflat[i] - numeric) / max(abs(gflat[i]), abs(numeric), 1e-12)
            worst = max(worst, err)
    return worst
