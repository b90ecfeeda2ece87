"""Dense tensors with reverse-mode automatic differentiation.

Tensors wrap flat row-major numpy arrays (float32 by default). Every
operation records its parents and a closure computing the parents'
gradient contributions; ``backward()`` replays the graph in reverse
construction order. This is all the machinery the layers in this
package need -- no views, no broadcasting tricks beyond what the ops
below implement explicitly.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ContractError, DegenerateBatchError, DimensionError

# Default storage dtype. Gradient-verification tests may switch to
# float64 to keep finite differences out of the float32 noise floor.
DTYPE = np.float32


def set_default_dtype(dtype) -> None:
    global DTYPE
    DTYPE = np.dtype(dtype).type


class Tensor:
    """N-dimensional array node in a dynamically built compute graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward_fn=None):
        arr = np.asarray(data, dtype=DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents
        self._backward_fn = _backward_fn

    # -- introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    # -- autodiff ------------------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into .grad of every reachable tensor.

        Grads accumulate across calls; running backward twice without
        zeroing doubles every gradient.
        """
        if self.data.size != 1:
            raise ContractError(f"backward requires a scalar, got shape {self.data.shape}")
        topo = _toposort(self)
        local = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = local.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
            if node._backward_fn is None:
                continue
            for parent, pg in zip(node._parents, node._backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                acc = local.get(id(parent))
                if acc is None:
                    local[id(parent)] = pg.astype(parent.data.dtype, copy=True)
                else:
                    acc += pg

    # -- operators -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(as_tensor(other), -1.0))

    def __matmul__(self, other):
        return matmul(self, other)


def _toposort(root: Tensor):
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DTYPE))


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise and structural ops ------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} do not broadcast")
    return Tensor(out, _parents=(a, b),
                  _backward_fn=lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")
    return Tensor(out, _parents=(a, b),
                  _backward_fn=lambda g: (_unbroadcast(g * b.data, a.shape),
                                          _unbroadcast(g * a.data, b.shape)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; 2-d, or 3-d with identical leading (batch) dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    if a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0]:
        raise DimensionError(f"matmul: batch dims differ: {a.shape} vs {b.shape}")
    out = a.data @ b.data

    def bwd(g):
        ga = g @ b.data.swapaxes(-1, -2)
        gb = a.data.swapaxes(-1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor(out, _parents=(a, b), _backward_fn=bwd)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0  # subgradient 0 at the kink
    return Tensor(x.data * mask, _parents=(x,), _backward_fn=lambda g: (g * mask,))


def reciprocal(x: Tensor) -> Tensor:
    x = as_tensor(x)
    y = 1.0 / x.data
    return Tensor(y, _parents=(x,), _backward_fn=lambda g: (-g * y * y,))


def softmax(x: Tensor) -> Tensor:
    """Softmax along the last axis, stabilized by max-subtraction."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return Tensor(y, _parents=(x,), _backward_fn=bwd)


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance (no affine)."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (x.data - mu) * inv

    def bwd(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return Tensor(y, _parents=(x,), _backward_fn=bwd)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout. Callers skip this entirely in eval mode."""
    x = as_tensor(x)
    if rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    return Tensor(x.data * keep, _parents=(x,), _backward_fn=lambda g: (g * keep,))


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(
            f"concat: shapes {[t.shape for t in tensors]} do not conform on axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(out, _parents=tuple(tensors), _backward_fn=bwd)


def embedding_lookup(table: Tensor, indices) -> Tensor:
    """Gather rows of ``table``; gradient scatter-adds back into the table."""
    table = as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(
            f"embedding index out of range [0, {table.shape[0]}): "
            f"min {idx.min()}, max {idx.max()}")
    out = table.data[idx]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return Tensor(out, _parents=(table,), _backward_fn=bwd)


def index_select(x: Tensor, indices) -> Tensor:
    """Select rows (axis 0); duplicate indices accumulate gradient."""
    return embedding_lookup(x, indices)


def scatter_rows(rows: Tensor, indices, num_rows: int) -> Tensor:
    """Place ``rows`` at positions ``indices`` of a zero [num_rows, ...] tensor."""
    rows = as_tensor(rows)
    idx = np.asarray(indices, dtype=np.int64)
    out = np.zeros((num_rows,) + rows.shape[1:], dtype=rows.data.dtype)
    np.add.at(out, idx, rows.data)
    return Tensor(out, _parents=(rows,), _backward_fn=lambda g: (g[idx],))


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    out = x.data.reshape(shape)
    return Tensor(out, _parents=(x,), _backward_fn=lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor(np.ascontiguousarray(x.data.transpose(axes)), _parents=(x,),
                  _backward_fn=lambda g: (g.transpose(inv),))


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, x.shape).copy(),)

    return Tensor(out, _parents=(x,), _backward_fn=bwd)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        n = x.data.size
    else:
        n = x.shape[axis]
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def mean_pool(x: Tensor, axis: int) -> Tensor:
    return tmean(x, axis=axis)


def segment_mean(x: Tensor, segment_ids, num_segments: int, token_mask=None) -> Tensor:
    """Per-segment mean of rows of x [T, d] -> [num_segments, d].

    token_mask (optional, [T] of 0/1) excludes masked rows from the mean.
    Implemented as a constant averaging matrix so gradients flow through x.
    """
    x = as_tensor(x)
    seg = np.asarray(segment_ids, dtype=np.int64)
    w = np.ones(len(seg), dtype=x.data.dtype) if token_mask is None \
        else np.asarray(token_mask, dtype=x.data.dtype)
    mat = np.zeros((num_segments, len(seg)), dtype=x.data.dtype)
    mat[seg, np.arange(len(seg))] = w
    counts = mat.sum(axis=1, keepdims=True)
    counts[counts == 0] = 1.0
    mat /= counts
    return matmul(Tensor(mat), x)


def cross_entropy(logits: Tensor, targets, pad_index=None) -> Tensor:
    """Mean negative log-likelihood over non-pad positions.

    logits: [positions, vocab]; targets: int array [positions].
    """
    logits = as_tensor(logits)
    tgt = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or tgt.shape != (logits.shape[0],):
        raise DimensionError(
            f"cross_entropy: logits {logits.shape} vs targets {tgt.shape}")
    keep = np.ones_like(tgt, dtype=bool) if pad_index is None else tgt != pad_index
    n = int(keep.sum())
    if n == 0:
        raise DegenerateBatchError("cross_entropy: every position is padding")
    bad = keep & ((tgt < 0) | (tgt >= logits.shape[1]))
    if bad.any():
        raise IndexError("cross_entropy: target index outside vocabulary")

    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    safe_tgt = np.where(keep, tgt, 0)
    picked = logp[np.arange(len(tgt)), safe_tgt]
    loss = -(picked * keep).sum() / n

    def bwd(g):
        p = np.exp(logp)
        p[np.arange(len(tgt)), safe_tgt] -= 1.0
        p *= (keep / n)[:, None]
        return (g.reshape(()) * p,)

    return Tensor(np.asarray(loss, dtype=logits.data.dtype),
                  _parents=(logits,), _backward_fn=bwd)


def xavier(rng: np.random.Generator, d_in: int, d_out: int) -> np.ndarray:
    """Glorot-normal weight matrix [d_in, d_out]."""
    scale = math.sqrt(2.0 / (d_in + d_out))
    return rng.normal(0.0, scale, (d_in, d_out))


# -- optimization ------------------------------------------------------


class Adam:
    """Standard Adam with bias correction; state is per-parameter."""

    def __init__(self, params, lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            p.data -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)


def clip_global_norm(params, max_norm: float) -> float:
    """Scale all grads so their joint L2 norm is at most max_norm."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


# -- verification ------------------------------------------------------


def grad_check(f, x: Tensor, epsilon: float = 1e-3) -> float:
    """Max relative error between autodiff and central-difference gradients.

    ``f`` must be a re-runnable scalar-valued function of ``x``. Callers
    checking routed layers must freeze routing decisions first; finite
    differences across a discrete routing boundary are meaningless.
    """
    x.grad = None
    out = f(x)
    if out.data.size != 1:
        raise ContractError("grad_check requires a scalar-valued function")
    out.backward()
    analytic = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        hi = f(x).item()
        flat[i] = orig - epsilon
        lo = f(x).item()
        flat[i] = orig
        nflat[i] = (hi - lo) / (2 * epsilon)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
