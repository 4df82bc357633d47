"""Minimal reverse-mode autodiff over float64 numpy arrays.

Tensors wrap ndarrays and remember how they were produced; `backward` walks
the graph once in reverse topological order. The op set is exactly what the
set-abstraction network needs: affine maps, relu, set max pooling, last-axis
concatenation, batched row gathers, per-set standardization, stable softmax
cross entropy, and two fused edge kernels (matrix-vector alignment and the
orthogonality penalty) whose gradients are hand derived.

Everything is float64 and single threaded on purpose: gradient checks sit at
1e-4 relative tolerance and training runs must be bit-reproducible.
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

_finite_checks = True


def set_finite_checks(enabled: bool) -> bool:
    """Toggle NaN/Inf screening on tensor creation; returns the old value."""
    global _finite_checks
    old = _finite_checks
    _finite_checks = bool(enabled)
    return old


class Tensor:
    """A float64 array plus the plumbing to backpropagate through it."""

    __slots__ = ("values", "grad", "needs_grad", "name", "_parents", "_backward")

    def __init__(self, values, parents: tuple = (), needs_grad: bool = True,
                 name: Optional[str] = None):
        v = np.asarray(values, dtype=np.float64)
        if _finite_checks and not np.isfinite(v).all():
            raise FloatingPointError(
                f"non-finite values entering tensor {name or '<anon>'}"
            )
        self.values = v
        self.grad: Optional[np.ndarray] = None
        self.needs_grad = needs_grad
        self.name = name
        self._parents = parents
        self._backward = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    def _add_grad(self, g: np.ndarray):
        if not self.needs_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        self.grad += g

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = self.name or "tensor"
        return f"Tensor({tag}, shape={self.values.shape})"


def parameter(values, name: Optional[str] = None) -> Tensor:
    """Trainable leaf."""
    return Tensor(np.array(values, dtype=np.float64), needs_grad=True, name=name)


def constant(values, name: Optional[str] = None) -> Tensor:
    """Leaf that never accumulates gradient (inputs, geometry, labels)."""
    return Tensor(values, needs_grad=False, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _make(values, parents: Sequence[Tensor], backward_fn) -> Tensor:
    """Wire an op output; skips the closure entirely on constant subgraphs."""
    parents = tuple(parents)
    if not any(p.needs_grad for p in parents):
        return Tensor(values, needs_grad=False)
    out = Tensor(values, parents=parents, needs_grad=True)
    out._backward = backward_fn(out)
    return out


def backward(loss: Tensor):
    """Populate .grad on every reachable leaf tensor that needs one.

    The loss must be scalar. Visit order is a deterministic iterative
    post-order, so repeated runs accumulate in the same sequence bit for bit.
    Interior nodes are consumed as the sweep passes them: their grad buffer
    and closure are dropped once propagated, so peak memory tracks the
    gradient frontier rather than the whole graph. A graph can therefore be
    swept only once.
    """
    if loss.values.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    topo: list = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.needs_grad:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.values)
    for node in reversed(topo):
        if node._backward is None:
            continue
        if node.grad is not None:
            node._backward()
        node.grad = None
        node._backward = None
        node._parents = ()


# ---------------------------------------------------------------------------
# elementwise / broadcast arithmetic
# ---------------------------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bwd(out):
        def run():
            a._add_grad(_unbroadcast(out.grad, a.values.shape))
            b._add_grad(_unbroadcast(out.grad, b.values.shape))
        return run

    return _make(a.values + b.values, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bwd(out):
        def run():
            a._add_grad(_unbroadcast(out.grad, a.values.shape))
            b._add_grad(-_unbroadcast(out.grad, b.values.shape))
        return run

    return _make(a.values - b.values, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bwd(out):
        def run():
            a._add_grad(_unbroadcast(out.grad * b.values, a.values.shape))
            b._add_grad(_unbroadcast(out.grad * a.values, b.values.shape))
        return run

    return _make(a.values * b.values, (a, b), bwd)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)

    def bwd(out):
        def run():
            a._add_grad(out.grad * c)
        return run

    return _make(a.values * c, (a,), bwd)


def square(a) -> Tensor:
    a = as_tensor(a)

    def bwd(out):
        def run():
            a._add_grad(out.grad * (2.0 * a.values))
        return run

    return _make(a.values * a.values, (a,), bwd)


# ---------------------------------------------------------------------------
# affine map and activation
# ---------------------------------------------------------------------------

def linear(x, w, b=None) -> Tensor:
    """y = x @ w (+ b) applied along the last axis of x.

    x: (..., fin), w: (fin, fout), b: (fout,). Leading axes are flattened for
    one GEMM and restored, which is where nearly all training time goes.
    """
    x, w = as_tensor(x), as_tensor(w)
    b = None if b is None else as_tensor(b)
    fin, fout = w.values.shape
    if x.values.shape[-1] != fin:
        raise ValueError(
            f"linear shape mismatch: x ends in {x.values.shape[-1]}, w expects {fin}"
        )
    lead = x.values.shape[:-1]
    x2 = x.values.reshape(-1, fin)
    y2 = x2 @ w.values
    if b is not None:
        if b.values.shape != (fout,):
            raise ValueError(f"bias must have shape ({fout},), got {b.values.shape}")
        y2 = y2 + b.values
    parents = (x, w) if b is None else (x, w, b)

    def bwd(out):
        def run():
            g2 = out.grad.reshape(-1, fout)
            if x.needs_grad:
                x._add_grad((g2 @ w.values.T).reshape(*lead, fin))
            if w.needs_grad:
                w._add_grad(x2.T @ g2)
            if b is not None and b.needs_grad:
                b._add_grad(g2.sum(axis=0))
        return run

    return _make(y2.reshape(*lead, fout), parents, bwd)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.values > 0.0

    def bwd(out):
        def run():
            x._add_grad(out.grad * mask)
        return run

    return _make(np.where(mask, x.values, 0.0), (x,), bwd)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def max_reduce(x, axis: int) -> Tensor:
    """Max along one axis; gradient flows to the first (lowest index) argmax."""
    x = as_tensor(x)
    axis = axis if axis >= 0 else x.values.ndim + axis
    if x.values.shape[axis] < 1:
        raise ValueError("cannot max-reduce an empty axis")
    am = x.values.argmax(axis=axis)
    out_vals = np.take_along_axis(x.values, np.expand_dims(am, axis), axis)

    def bwd(out):
        def run():
            g = np.zeros_like(x.values)
            np.put_along_axis(
                g, np.expand_dims(am, axis), np.expand_dims(out.grad, axis), axis
            )
            x._add_grad(g)
        return run

    return _make(np.squeeze(out_vals, axis=axis), (x,), bwd)


def max_pool_set(x) -> Tensor:
    """Permutation-invariant max over the set axis (second to last)."""
    return max_reduce(x, axis=-2)


def sum_reduce(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out_vals = x.values.sum(axis=axis, keepdims=keepdims)

    def bwd(out):
        def run():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            x._add_grad(np.broadcast_to(g, x.values.shape).copy())
        return run

    return _make(out_vals, (x,), bwd)


def mean_reduce(x) -> Tensor:
    x = as_tensor(x)
    return scale(sum_reduce(x), 1.0 / x.values.size)


def reshape(x, shape: tuple) -> Tensor:
    x = as_tensor(x)
    old = x.values.shape

    def bwd(out):
        def run():
            x._add_grad(out.grad.reshape(old))
        return run

    return _make(x.values.reshape(shape), (x,), bwd)


def expand_set(x, size: int, axis: int = -2) -> Tensor:
    """Insert an axis of length `size` by repetition (backward sums over it).

    Used to pair each reference feature with every one of its k neighbors.
    """
    x = as_tensor(x)
    ax = axis if axis >= 0 else x.values.ndim + 1 + axis
    out_vals = np.repeat(np.expand_dims(x.values, ax), size, axis=ax)

    def bwd(out):
        def run():
            x._add_grad(out.grad.sum(axis=ax))
        return run

    return _make(out_vals, (x,), bwd)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    """Concatenate along `axis` (default: the feature axis)."""
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat of nothing")
    vals = [t.values for t in ts]
    out_vals = np.concatenate(vals, axis=axis)
    ax = axis if axis >= 0 else out_vals.ndim + axis
    sizes = [v.shape[ax] for v in vals]
    offsets = np.cumsum([0] + sizes)

    def bwd(out):
        def run():
            for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
                if t.needs_grad:
                    sl = [slice(None)] * out.grad.ndim
                    sl[ax] = slice(lo, hi)
                    t._add_grad(out.grad[tuple(sl)])
        return run

    return _make(out_vals, ts, bwd)


def _scatter_add_rows(n_rows: int, flat_idx: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Deterministic segmented scatter-add of 2d rows into an (n_rows, f) array.

    Sort + np.add.reduceat instead of np.add.at: same result, an order of
    magnitude faster, and the within-segment summation order is fixed by the
    stable sort.
    """
    out = np.zeros((n_rows, rows.shape[1]), dtype=np.float64)
    if flat_idx.size == 0:
        return out
    order = np.argsort(flat_idx, kind="stable")
    si = flat_idx[order]
    starts = np.flatnonzero(np.concatenate(([True], si[1:] != si[:-1])))
    sums = np.add.reduceat(rows[order], starts, axis=0)
    out[si[starts]] = sums
    return out


def gather_rows(x, indices: np.ndarray) -> Tensor:
    """Batched row lookup: x (b, n, f) indexed by integer indices (b, ...).

    Output shape is indices.shape + (f,). The backward pass scatter-adds into
    the source rows, so repeated indices accumulate.
    """
    x = as_tensor(x)
    if x.values.ndim != 3:
        raise ValueError(f"gather_rows expects (b, n, f) input, got {x.values.shape}")
    b, n, f = x.values.shape
    idx = np.asarray(indices)
    if idx.shape[0] != b:
        raise ValueError(f"indices lead with {idx.shape[0]}, batch is {b}")
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError("gather index out of range")
    bidx = np.arange(b).reshape((b,) + (1,) * (idx.ndim - 1))
    bfull = np.broadcast_to(bidx, idx.shape)
    out_vals = x.values[bfull, idx]

    def bwd(out):
        def run():
            flat = (bfull * n + idx).ravel()
            rows = out.grad.reshape(-1, f)
            x._add_grad(_scatter_add_rows(b * n, flat, rows).reshape(b, n, f))
        return run

    return _make(out_vals, (x,), bwd)


# ---------------------------------------------------------------------------
# normalization, loss, and fused edge kernels
# ---------------------------------------------------------------------------

STANDARDIZE_EPS = 1e-6


def standardize(x, gamma, beta, axes: tuple) -> Tensor:
    """Zero-mean unit-variance over the given set axes, then scale and shift.

    gamma and beta are (f,) and broadcast over the last axis. Statistics are
    per sample and per feature; `axes` names the set axes to pool over (for
    (b, n, f) activations that is (1,), for (b, r, k, f) it is (1, 2) or (2,)
    depending on what counts as one set).
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    axes = tuple(a if a >= 0 else x.values.ndim + a for a in axes)
    if x.values.ndim - 1 in axes:
        raise ValueError("cannot standardize over the feature axis")
    m = 1
    for a in axes:
        m *= x.values.shape[a]
    mu = x.values.mean(axis=axes, keepdims=True)
    diff = x.values - mu
    var = (diff * diff).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + STANDARDIZE_EPS)
    xhat = diff * inv
    out_vals = xhat * gamma.values + beta.values

    def bwd(out):
        def run():
            g = out.grad
            sum_axes = tuple(range(g.ndim - 1))
            if gamma.needs_grad:
                gamma._add_grad((g * xhat).sum(axis=sum_axes))
            if beta.needs_grad:
                beta._add_grad(g.sum(axis=sum_axes))
            if x.needs_grad:
                dxhat = g * gamma.values
                t1 = dxhat.sum(axis=axes, keepdims=True)
                t2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
                x._add_grad((inv / m) * (m * dxhat - t1 - xhat * t2))
        return run

    return _make(out_vals, (x, gamma, beta), bwd)


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log likelihood with a stable log-softmax.

    logits: (..., c); labels: integer array of the leading shape (or a bare
    int for a single example). The mean is over all label positions.
    """
    logits = as_tensor(logits)
    lab = np.asarray(labels, dtype=np.int64)
    c = logits.values.shape[-1]
    if lab.shape != logits.values.shape[:-1]:
        raise ValueError(
            f"labels shape {lab.shape} does not match logits {logits.values.shape}"
        )
    if lab.size and (lab.min() < 0 or lab.max() >= c):
        raise ValueError("label out of range")
    z = logits.values - logits.values.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e.sum(axis=-1, keepdims=True)
    logp = z - np.log(s)
    n = max(1, lab.size)
    picked = np.take_along_axis(logp, lab[..., None], axis=-1)[..., 0]
    loss = -picked.sum() / n

    def bwd(out):
        def run():
            p = e / s
            onehot = np.zeros_like(p)
            np.put_along_axis(onehot, lab[..., None], 1.0, axis=-1)
            logits._add_grad((p - onehot) * (out.grad / n))
        return run

    return _make(loss, (logits,), bwd)


def edge_matvec(m, x) -> Tensor:
    """Per-edge matrix-vector product: m (..., f, f) applied to x (..., f)."""
    m, x = as_tensor(m), as_tensor(x)
    out_vals = np.einsum("...ij,...j->...i", m.values, x.values)

    def bwd(out):
        def run():
            if m.needs_grad:
                m._add_grad(np.einsum("...i,...j->...ij", out.grad, x.values))
            if x.needs_grad:
                x._add_grad(np.einsum("...ij,...i->...j", m.values, out.grad))
        return run

    return _make(out_vals, (m, x), bwd)


def orthogonality_penalty(m) -> Tensor:
    """Mean squared Frobenius distance of m @ m^T from the identity.

    m: (..., f, f) stacked per-edge matrices; the mean runs over the stack.
    Gradient is (4 / count) * (m m^T - I) m per matrix.
    """
    m = as_tensor(m)
    f = m.values.shape[-1]
    if m.values.shape[-2] != f:
        raise ValueError(f"expected square trailing dims, got {m.values.shape}")
    count = max(1, int(np.prod(m.values.shape[:-2])))
    gram = np.einsum("...ik,...jk->...ij", m.values, m.values)
    dev = gram - np.eye(f)
    penalty = float((dev * dev).sum()) / count

    def bwd(out):
        def run():
            m._add_grad(np.einsum(
                "...ij,...jk->...ik", dev, m.values
            ) * (4.0 * out.grad / count))
        return run

    return _make(penalty, (m,), bwd)
