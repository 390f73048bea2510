"""Dense float tensors with reverse-mode automatic differentiation.

The engine is deliberately small: numpy arrays for storage (float32 for
network math, float64 where the latent algebra needs it), a dynamic
record-on-execute graph, and exactly the operations the segmentation model
requires. Reductions accumulate in float64 to avoid drift in long sums.

The graph is the DAG of ``_prev`` links hanging off each result tensor;
``backward()`` recovers a topological order and runs the recorded backward
closures in reverse. Recording is skipped when no input requires a gradient
or inside a ``no_grad()`` block.
"""

from __future__ import annotations

import struct
from typing import Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables graph recording."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._saved = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._saved
        return False


class Tensor:
    """n-dimensional float array with an attached gradient slot.

    ``data`` is a row-major numpy array (float32 or float64). ``grad`` is
    lazily allocated with the same shape during ``backward()``. Leaf tensors
    created with ``requires_grad=True`` are the trainable parameters;
    everything produced from them records enough state to backpropagate.
    """

    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            raise TypeError("wrap raw arrays, not Tensors")
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._prev: tuple = ()
        self._backward = None
        self._op = "leaf"

    # -- basics -----------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, op={self._op})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of size {self.data.size}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    # -- graph ------------------------------------------------------------

    def backward(self):
        """Populate ``grad`` of every reachable tensor with d(self)/d(leaf).

        ``self`` must be a scalar (size one).
        """
        if self.data.size != 1:
            raise ShapeError("backward() requires a scalar loss")
        topo: list[Tensor] = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._prev:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, neg(other))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def _result(data, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    """Wrap an op result, recording it on the graph when gradients flow."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._prev = ()
    out._backward = None
    out._op = op
    out.requires_grad = False
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._prev = tuple(parents)
        out._backward = backward
    return out


def _same_dtype(*ts: Tensor):
    d = ts[0].data.dtype
    for t in ts[1:]:
        if t.data.dtype != d:
            raise TypeError(f"dtype mismatch: {d} vs {t.data.dtype}; use cast()")
    return d


# -- elementwise and shape ops ---------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"add: {a.shape} vs {b.shape}")
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accum(g)
        if b.requires_grad:
            b._accum(g)

    return _result(out_data, (a, b), backward, "add")


def neg(a: Tensor) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a._accum(-g)

    return _result(-a.data, (a,), backward, "neg")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accum(g * b.data)
        if b.requires_grad:
            b._accum(g * a.data)

    return _result(a.data * b.data, (a, b), backward, "mul")


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def backward(g):
        if a.requires_grad:
            a._accum(g * s)

    return _result(a.data * a.data.dtype.type(s), (a,), backward, "scale")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def backward(g):
        if a.requires_grad:
            a._accum(g.reshape(a.shape))

    return _result(a.data.reshape(shape), (a,), backward, "reshape")


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError("transpose expects a 2-d tensor")

    def backward(g):
        if a.requires_grad:
            a._accum(g.T)

    return _result(a.data.T.copy(), (a,), backward, "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat of empty list")
    _same_dtype(*tensors)
    sizes = [t.shape[axis] for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accum(g[tuple(idx)])

    return _result(out_data, tensors, backward, "concat")


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[idx] = g
            a._accum(full)

    return _result(a.data[idx].copy(), (a,), backward, "slice")


def cast(a: Tensor, dtype) -> Tensor:
    dtype = np.dtype(dtype)

    def backward(g):
        if a.requires_grad:
            a._accum(g.astype(a.data.dtype))

    return _result(a.data.astype(dtype), (a,), backward, "cast")


# -- activations and transcendentals ----------------------------------------

PROB_EPS = 1e-7  # probabilities are clamped to [PROB_EPS, 1 - PROB_EPS]


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        if a.requires_grad:
            a._accum(g * mask)

    return _result(a.data * mask, (a,), backward, "relu")


def sigmoid(a: Tensor) -> Tensor:
    # Clamped away from exactly 0/1 so downstream logs stay finite.
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    np.clip(y, PROB_EPS, 1.0 - PROB_EPS, out=y)

    def backward(g):
        if a.requires_grad:
            a._accum(g * y * (1.0 - y))

    return _result(y, (a,), backward, "sigmoid")


def activation(a: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(a)
    if kind == "sigmoid":
        return sigmoid(a)
    raise ValueError(f"unknown activation kind {kind!r}")


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            a._accum(g * out_data)

    return _result(out_data, (a,), backward, "exp")


def log(a: Tensor) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a._accum(g / a.data)

    return _result(np.log(a.data), (a,), backward, "log")


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    mask = (a.data >= lo) & (a.data <= hi)

    def backward(g):
        if a.requires_grad:
            a._accum(g * mask)

    return _result(np.clip(a.data, lo, hi), (a,), backward, "clamp")


# -- reductions --------------------------------------------------------------


def tsum(a: Tensor) -> Tensor:
    out_data = np.asarray(a.data.sum(dtype=np.float64), dtype=a.data.dtype)

    def backward(g):
        if a.requires_grad:
            a._accum(np.full_like(a.data, g))

    return _result(out_data, (a,), backward, "sum")


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    out_data = np.asarray(a.data.mean(dtype=np.float64), dtype=a.data.dtype)

    def backward(g):
        if a.requires_grad:
            a._accum(np.full_like(a.data, g / n))

    return _result(out_data, (a,), backward, "mean")


def mean_hw(a: Tensor) -> Tensor:
    """Global average pool NCHW -> NC."""
    if a.data.ndim != 4:
        raise ShapeError("mean_hw expects NCHW")
    n_px = a.shape[2] * a.shape[3]
    out_data = a.data.mean(axis=(2, 3), dtype=np.float64).astype(a.data.dtype)

    def backward(g):
        if a.requires_grad:
            a._accum(np.broadcast_to((g / n_px)[:, :, None, None], a.shape))

    return _result(out_data, (a,), backward, "mean_hw")


# -- linear algebra ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2):
        raise ShapeError("matmul supports 1-d and 2-d operands only")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        ad, bd = a.data, b.data
        if a.requires_grad:
            if ad.ndim == 2 and bd.ndim == 2:
                a._accum(g @ bd.T)
            elif ad.ndim == 2 and bd.ndim == 1:
                a._accum(np.outer(g, bd))
            elif ad.ndim == 1 and bd.ndim == 2:
                a._accum(bd @ g)
            else:
                a._accum(g * bd)
        if b.requires_grad:
            if ad.ndim == 2 and bd.ndim == 2:
                b._accum(ad.T @ g)
            elif ad.ndim == 2 and bd.ndim == 1:
                b._accum(ad.T @ g)
            elif ad.ndim == 1 and bd.ndim == 2:
                b._accum(np.outer(ad, g))
            else:
                b._accum(g * ad)

    return _result(out_data, (a, b), backward, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map: (N,F) @ (F,G) + (G,)."""
    _same_dtype(x, w, b)
    if x.data.ndim != 2 or w.data.ndim != 2 or b.data.ndim != 1:
        raise ShapeError("linear expects x(N,F), w(F,G), b(G,)")
    if x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise ShapeError(f"linear: x{x.shape} w{w.shape} b{b.shape}")
    out_data = x.data @ w.data + b.data

    def backward(g):
        if x.requires_grad:
            x._accum(g @ w.data.T)
        if w.requires_grad:
            w._accum(x.data.T @ g)
        if b.requires_grad:
            b._accum(g.sum(axis=0))

    return _result(out_data, (x, w, b), backward, "linear")


def diag_embed(v: Tensor) -> Tensor:
    if v.data.ndim != 1:
        raise ShapeError("diag_embed expects a vector")

    def backward(g):
        if v.requires_grad:
            v._accum(np.diagonal(g).copy())

    return _result(np.diag(v.data), (v,), backward, "diag_embed")


def diag_part(a: Tensor) -> Tensor:
    if a.data.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError("diag_part expects a square matrix")

    def backward(g):
        if a.requires_grad:
            a._accum(np.diag(g))

    return _result(np.diagonal(a.data).copy(), (a,), backward, "diag_part")


def _tri_solve_lower_raw(lmat, b):
    """Forward substitution, column by column. Shapes stay tiny (k <= D)."""
    n = lmat.shape[0]
    bm = b.reshape(n, -1)
    x = np.zeros_like(bm)
    for i in range(n):
        x[i] = (bm[i] - lmat[i, :i] @ x[:i]) / lmat[i, i]
    return x.reshape(b.shape)


def _tri_solve_upper_raw(u, b):
    """Back substitution for an upper-triangular system."""
    n = u.shape[0]
    bm = b.reshape(n, -1)
    x = np.zeros_like(bm)
    for i in range(n - 1, -1, -1):
        x[i] = (bm[i] - u[i, i + 1:] @ x[i + 1:]) / u[i, i]
    return x.reshape(b.shape)


def tri_solve_lower(lower: Tensor, b: Tensor) -> Tensor:
    """Solve L x = b for lower-triangular L; b is a vector or matrix."""
    _same_dtype(lower, b)
    if lower.data.ndim != 2 or lower.shape[0] != lower.shape[1]:
        raise ShapeError("tri_solve_lower expects a square matrix")
    if b.shape[0] != lower.shape[0]:
        raise ShapeError(f"tri_solve_lower: L{lower.shape} b{b.shape}")
    x_data = _tri_solve_lower_raw(lower.data, b.data)

    def backward(g):
        gb = _tri_solve_upper_raw(lower.data.T, g)
        if b.requires_grad:
            b._accum(gb)
        if lower.requires_grad:
            gb2 = gb.reshape(lower.shape[0], -1)
            x2 = x_data.reshape(lower.shape[0], -1)
            lower._accum(np.tril(-gb2 @ x2.T))

    return _result(x_data, (lower, b), backward, "tri_solve_lower")


class CholeskyError(RuntimeError):
    """Matrix stayed indefinite through the whole jitter ladder."""


JITTER_LADDER = (0.0, 1e-8, 1e-6)


def _chol_psd_raw(a):
    """Lower Cholesky factor tolerant of exactly singular PSD input.

    Zero pivots produce zero columns (valid factorization of a rank-
    deficient PSD matrix). Returns None when a pivot goes negative beyond
    round-off, signalling the caller to escalate jitter.
    """
    n = a.shape[0]
    tol = 1e-10 * max(1.0, float(np.max(np.abs(np.diagonal(a)))))
    lmat = np.zeros_like(a)
    for j in range(n):
        d = a[j, j] - lmat[j, :j] @ lmat[j, :j]
        if d < -tol:
            return None
        if d <= 0.0:
            continue  # zero pivot: leave column j at zero
        lmat[j, j] = np.sqrt(d)
        for i in range(j + 1, n):
            lmat[i, j] = (a[i, j] - lmat[i, :j] @ lmat[j, :j]) / lmat[j, j]
    return lmat


def cholesky(a: Tensor) -> tuple[Tensor, float]:
    """Lower-triangular factor of ``a + jitter*I`` with escalating jitter.

    Returns ``(L, jitter_used)``. Raises CholeskyError when the matrix is
    still indefinite at the top of the ladder. Differentiable w.r.t. ``a``
    (gradient follows the symmetric-input convention).
    """
    ad = a.data
    if ad.ndim != 2 or ad.shape[0] != ad.shape[1]:
        raise ShapeError("cholesky expects a square matrix")
    sym_err = float(np.max(np.abs(ad - ad.T))) if ad.size else 0.0
    if sym_err > 1e-6 * max(1.0, float(np.max(np.abs(ad)))):
        raise CholeskyError(f"cholesky expects a symmetric matrix (err {sym_err:g})")
    l_data = None
    jitter_used = 0.0
    for jitter in JITTER_LADDER:
        m = ad if jitter == 0.0 else ad + jitter * np.eye(ad.shape[0], dtype=ad.dtype)
        l_data = _chol_psd_raw(m)
        if l_data is not None:
            jitter_used = jitter
            break
    if l_data is None:
        raise CholeskyError("matrix is not positive semi-definite after max jitter")

    def backward(g):
        if not a.requires_grad:
            return
        # Reverse-mode rule for A = L L^T with symmetric A: project the
        # factor cotangent back through the triangular structure.
        lm = l_data
        # Rows/cols with zero pivot carry no first-order information.
        safe = lm.copy()
        zero = np.diagonal(safe) == 0.0
        if zero.any():
            safe = safe + np.diag(zero.astype(safe.dtype))
        p = lm.T @ g
        phi = np.tril(p)
        np.fill_diagonal(phi, 0.5 * np.diagonal(p))
        tmp = _tri_solve_upper_raw(safe.T, phi)
        grad_a = _tri_solve_upper_raw(safe.T, tmp.T).T
        a._accum(0.5 * (grad_a + grad_a.T))

    return _result(l_data, (a,), backward, "cholesky"), jitter_used


# -- convolution and spatial ops ---------------------------------------------


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of NCHW input with OIKhKw kernels, zero padding."""
    _same_dtype(x, w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError("conv2d expects NCHW input and OIKhKw kernel")
    n, c, h, wdt = x.shape
    o, i, kh, kw = w.shape
    if c != i:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {i}")
    if stride < 1 or padding < 0:
        raise ShapeError("conv2d: stride must be >= 1 and padding >= 0")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wdt + 2 * padding - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv2d: non-positive output extent {oh}x{ow}")

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    # Column matrix in (c*kh*kw, n*oh*ow) layout, filled by one strided
    # slice copy per kernel offset: every copy streams contiguous rows,
    # unlike a transposed sliding-window view, which thrashes the cache.
    xpt = xp.transpose(1, 0, 2, 3)
    cols = np.empty((c, kh, kw, n, oh, ow), dtype=xp.dtype)
    for ky in range(kh):
        for kx in range(kw):
            cols[:, ky, kx] = xpt[:, :, ky:ky + stride * oh:stride, kx:kx + stride * ow:stride]
    cols = cols.reshape(c * kh * kw, n * oh * ow)
    w_mat = w.data.reshape(o, c * kh * kw)
    out_data = np.ascontiguousarray((w_mat @ cols).reshape(o, n, oh, ow).transpose(1, 0, 2, 3))

    def backward(g):
        g_mat = g.transpose(1, 0, 2, 3).reshape(o, n * oh * ow)
        if w.requires_grad:
            w._accum((g_mat @ cols.T).reshape(o, c, kh, kw))
        if x.requires_grad:
            g_cols = (w_mat.T @ g_mat).reshape(c, kh, kw, n, oh, ow)
            gx = np.zeros_like(xp)
            gxt = gx.transpose(1, 0, 2, 3)
            for ky in range(kh):
                for kx in range(kw):
                    gxt[:, :, ky:ky + stride * oh:stride, kx:kx + stride * ow:stride] += g_cols[:, ky, kx]
            if padding:
                gx = gx[:, :, padding:padding + h, padding:padding + wdt]
            x._accum(gx)

    return _result(out_data, (x, w), backward, "conv2d")


def add_channel_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias (C,) to an NCHW tensor."""
    _same_dtype(x, b)
    if x.data.ndim != 4 or b.data.ndim != 1 or b.shape[0] != x.shape[1]:
        raise ShapeError(f"add_channel_bias: x{x.shape} b{b.shape}")

    def backward(g):
        if x.requires_grad:
            x._accum(g)
        if b.requires_grad:
            b._accum(g.sum(axis=(0, 2, 3)))

    return _result(x.data + b.data[None, :, None, None], (x, b), backward, "add_channel_bias")


def avg_pool2d(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2 on NCHW."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2d needs even extents, got {h}x{w}")
    out_data = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward(g):
        if x.requires_grad:
            gx = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * x.data.dtype.type(0.25)
            x._accum(gx)

    return _result(out_data, (x,), backward, "avg_pool2d")


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x spatial upsampling on NCHW."""
    out_data = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward(g):
        if x.requires_grad:
            n, c, h2, w2 = g.shape
            x._accum(g.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5)))

    return _result(out_data, (x,), backward, "upsample2x")


def tile_latent(z: Tensor, h: int, w: int) -> Tensor:
    """Broadcast latent rows (N,D) over a spatial grid -> (N,D,H,W)."""
    if z.data.ndim != 2:
        raise ShapeError("tile_latent expects (N,D)")
    out_data = np.ascontiguousarray(np.broadcast_to(z.data[:, :, None, None], (*z.shape, h, w)))

    def backward(g):
        if z.requires_grad:
            z._accum(g.sum(axis=(2, 3)))

    return _result(out_data, (z,), backward, "tile_latent")


# -- loss ---------------------------------------------------------------------


def bce_with_logits(logits: Tensor, target: Tensor) -> Tensor:
    """Mean binary cross-entropy from logits, numerically stable.

    Uses max(x,0) - x*y + log1p(exp(-|x|)) per element and a float64
    accumulator for the mean. Targets must be exactly 0 or 1.
    """
    if logits.shape != target.shape:
        raise ShapeError(f"bce_with_logits: {logits.shape} vs {target.shape}")
    t = target.data
    if not np.all((t == 0) | (t == 1)):
        raise ValueError("bce_with_logits: target values must be 0 or 1")
    x = logits.data
    per_elem = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    out_data = np.asarray(per_elem.mean(dtype=np.float64), dtype=x.dtype)
    inv_n = 1.0 / x.size

    def backward(g):
        if logits.requires_grad:
            p = np.empty_like(x)
            pos = x >= 0
            p[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
            ex = np.exp(x[~pos])
            p[~pos] = ex / (1.0 + ex)
            logits._accum((p - t) * (g * inv_n))

    return _result(out_data, (logits, target), backward, "bce_with_logits")


# -- PTNSR1 binary tensor file format -----------------------------------------

PTNSR1_MAGIC = b"PTNSR1\n"


def write_ptnsr(path, array) -> None:
    """Write a float32 array: magic, u32 rank, u32 extents, then LE f32 payload."""
    arr = np.ascontiguousarray(np.asarray(array, dtype=np.float32))
    with open(path, "wb") as f:
        f.write(PTNSR1_MAGIC)
        f.write(struct.pack("<I", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.astype("<f4", copy=False).tobytes(order="C"))


def read_ptnsr(path) -> np.ndarray:
    """Read a PTNSR1 file back into a float32 array."""
    with open(path, "rb") as f:
        magic = f.read(len(PTNSR1_MAGIC))
        if magic != PTNSR1_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        (rank,) = struct.unpack("<I", f.read(4))
        if rank > 8:
            raise ValueError(f"{path}: implausible rank {rank}")
        shape = struct.unpack(f"<{rank}I", f.read(4 * rank))
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        payload = f.read()
    data = np.frombuffer(payload, dtype="<f4")
    if data.size != count:
        raise ValueError(f"{path}: payload has {data.size} values, header says {count}")
    return data.reshape(shape).astype(np.float32)


def sum_tensors(ts: Iterable[Tensor]) -> Tensor:
    """Fold a sequence of same-shape tensors with add."""
    ts = list(ts)
    acc = ts[0]
    for t in ts[1:]:
        acc = add(acc, t)
    return acc
