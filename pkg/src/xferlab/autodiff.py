"""Minimal reverse-mode autodiff over dense 2-D float arrays.

Everything is a ``Tensor2``: a (rows, cols) matrix with an optional
gradient. Scalars are (1, 1). The op set is exactly what the downstream
dialogue models need: linear maps, elementwise ops, row softmax, row layer
norm, inverted dropout, masked mean pooling, and fused classification /
regression losses. Graphs are built eagerly and freed after ``backward``.

No parallelism is used inside ops, so summation order is fixed and results
are reproducible for a given seed.
"""

from __future__ import annotations

import math

import numpy as np

DEFAULT_DTYPE = np.float32


class Tensor2:
    """A 2-D array node in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ValueError(f"Tensor2 is 2-D only, got shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor2, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on shape {self.shape}")
        return float(self.data.reshape(())[()])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor2(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        """Reverse-mode accumulation from a scalar root."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar root")
        if not self.requires_grad:
            raise ValueError("backward() on a graph with no trainable inputs")
        order: list[Tensor2] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor2, bool]] = [(self, False)]
        while stack:
            node, emit = stack.pop()
            if emit:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward()
                # free the closure; parameter grads survive on the leaves
                node._backward = None
                node._parents = ()


def as_tensor(x, dtype=None) -> Tensor2:
    if isinstance(x, Tensor2):
        return x
    return Tensor2(x, requires_grad=False, dtype=dtype)


def _node(data: np.ndarray, parents: tuple[Tensor2, ...], backward_builder) -> Tensor2:
    out = Tensor2(data, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = parents
        out._backward = backward_builder(out)
    return out


def _accum(t: Tensor2, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward op."""
    for axis in (0, 1):
        if shape[axis] == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a: Tensor2, b: Tensor2) -> Tensor2:
    def bwd(out):
        def run():
            _accum(a, _unbroadcast(out.grad, a.shape))
            _accum(b, _unbroadcast(out.grad, b.shape))

        return run

    return _node(a.data + b.data, (a, b), bwd)


def sub(a: Tensor2, b: Tensor2) -> Tensor2:
    def bwd(out):
        def run():
            _accum(a, _unbroadcast(out.grad, a.shape))
            _accum(b, _unbroadcast(-out.grad, b.shape))

        return run

    return _node(a.data - b.data, (a, b), bwd)


def mul(a: Tensor2, b: Tensor2) -> Tensor2:
    def bwd(out):
        def run():
            _accum(a, _unbroadcast(out.grad * b.data, a.shape))
            _accum(b, _unbroadcast(out.grad * a.data, b.shape))

        return run

    return _node(a.data * b.data, (a, b), bwd)


def scale(a: Tensor2, s: float) -> Tensor2:
    def bwd(out):
        def run():
            _accum(a, out.grad * s)

        return run

    return _node(a.data * s, (a,), bwd)


def matmul(a: Tensor2, b: Tensor2) -> Tensor2:
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def bwd(out):
        def run():
            _accum(a, out.grad @ b.data.T)
            _accum(b, a.data.T @ out.grad)

        return run

    return _node(a.data @ b.data, (a, b), bwd)


def linear(x: Tensor2, w: Tensor2, b: Tensor2) -> Tensor2:
    """Fused x @ w + b with b of shape (1, out_dim)."""
    if x.shape[1] != w.shape[0] or w.shape[1] != b.shape[1]:
        raise ValueError(f"linear shape mismatch {x.shape} @ {w.shape} + {b.shape}")

    def bwd(out):
        def run():
            _accum(x, out.grad @ w.data.T)
            _accum(w, x.data.T @ out.grad)
            _accum(b, out.grad.sum(axis=0, keepdims=True))

        return run

    return _node(x.data @ w.data + b.data, (x, w, b), bwd)


def transpose(a: Tensor2) -> Tensor2:
    def bwd(out):
        def run():
            _accum(a, out.grad.T)

        return run

    return _node(a.data.T.copy(), (a,), bwd)


def reshape(a: Tensor2, rows: int, cols: int) -> Tensor2:
    def bwd(out):
        def run():
            _accum(a, out.grad.reshape(a.shape))

        return run

    return _node(a.data.reshape(rows, cols), (a,), bwd)


def slice_cols(a: Tensor2, start: int, stop: int) -> Tensor2:
    def bwd(out):
        def run():
            g = np.zeros_like(a.data)
            g[:, start:stop] = out.grad
            _accum(a, g)

        return run

    return _node(a.data[:, start:stop].copy(), (a,), bwd)


def concat_cols(parts: list[Tensor2]) -> Tensor2:
    widths = [p.shape[1] for p in parts]

    def bwd(out):
        def run():
            offset = 0
            for p, w in zip(parts, widths):
                _accum(p, out.grad[:, offset : offset + w])
                offset += w

        return run

    return _node(np.hstack([p.data for p in parts]), tuple(parts), bwd)


def relu(a: Tensor2) -> Tensor2:
    mask = a.data > 0

    def bwd(out):
        def run():
            _accum(a, out.grad * mask)

        return run

    return _node(a.data * mask, (a,), bwd)


def softmax_rows(a: Tensor2) -> Tensor2:
    """Row-wise softmax with max subtraction; -inf entries get weight 0."""
    m = np.max(a.data, axis=1, keepdims=True)
    e = np.exp(a.data - m)
    p = e / e.sum(axis=1, keepdims=True)

    def bwd(out):
        def run():
            inner = (out.grad * p).sum(axis=1, keepdims=True)
            _accum(a, p * (out.grad - inner))

        return run

    return _node(p, (a,), bwd)


def layer_norm_rows(x: Tensor2, gain: Tensor2, bias: Tensor2, eps: float = 1e-5) -> Tensor2:
    """Normalize each row to zero mean / unit variance, then gain * x + bias."""
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bwd(out):
        def run():
            _accum(bias, out.grad.sum(axis=0, keepdims=True))
            _accum(gain, (out.grad * xhat).sum(axis=0, keepdims=True))
            d_xhat = out.grad * gain.data
            m1 = d_xhat.mean(axis=1, keepdims=True)
            m2 = (d_xhat * xhat).mean(axis=1, keepdims=True)
            _accum(x, inv * (d_xhat - m1 - xhat * m2))

        return run

    return _node(xhat * gain.data + bias.data, (x, gain, bias), bwd)


def dropout(x: Tensor2, p: float, training: bool, rng: np.random.Generator) -> Tensor2:
    """Inverted dropout: train-time scaling by 1/(1-p), identity at eval."""
    if not training or p <= 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout p={p} outside [0, 1)")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / np.asarray(1.0 - p, dtype=x.dtype)

    def bwd(out):
        def run():
            _accum(x, out.grad * keep)

        return run

    return _node(x.data * keep, (x,), bwd)


def multi_head_self_attention(
    x: Tensor2,
    wq: Tensor2,
    bq: Tensor2,
    wk: Tensor2,
    wv: Tensor2,
    bv: Tensor2,
    wo: Tensor2,
    bo: Tensor2,
    num_heads: int,
    key_mask: np.ndarray | None = None,
    dropout_p: float = 0.0,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor2:
    """Fused multi-head scaled-dot-product self-attention over (N, d) rows.

    One graph node with a hand-written backward pass; semantically equal to
    the composition of linear/slice/softmax/matmul primitives but ~5x fewer
    graph nodes. ``key_mask`` (boolean, shape (N,)) removes rows from every
    softmax via additive -inf. Attention-weight dropout is applied when
    training.
    """
    n, d = x.shape
    h = num_heads
    dh = d // h
    if dh * h != d:
        raise ValueError(f"d_model {d} not divisible by {h} heads")
    dt = x.dtype
    inv_sqrt = np.asarray(1.0 / math.sqrt(dh), dtype=dt)

    q = x.data @ wq.data + bq.data
    k = x.data @ wk.data
    v = x.data @ wv.data + bv.data

    add_mask = None
    if key_mask is not None and not key_mask.all():
        add_mask = np.where(key_mask, 0.0, -np.inf).astype(dt).reshape(1, n)

    probs = np.empty((h, n, n), dtype=dt)
    dropped = probs  # alias when no dropout
    keep_masks = None
    ctx = np.empty((n, d), dtype=dt)
    use_dropout = training and dropout_p > 0.0
    if use_dropout:
        if rng is None:
            raise ValueError("training-mode dropout needs an rng")
        keep_masks = np.empty((h, n, n), dtype=dt)
        dropped = np.empty((h, n, n), dtype=dt)
    for i in range(h):
        sl = slice(i * dh, (i + 1) * dh)
        scores = (q[:, sl] @ k[:, sl].T) * inv_sqrt
        if add_mask is not None:
            scores = scores + add_mask
        m = scores.max(axis=1, keepdims=True)
        e = np.exp(scores - m)
        p = e / e.sum(axis=1, keepdims=True)
        probs[i] = p
        if use_dropout:
            keep = (rng.random((n, n)) >= dropout_p).astype(dt) / np.asarray(
                1.0 - dropout_p, dtype=dt
            )
            keep_masks[i] = keep
            dropped[i] = p * keep
        ctx[:, sl] = dropped[i] @ v[:, sl]
    out_data = ctx @ wo.data + bo.data

    parents = (x, wq, bq, wk, wv, bv, wo, bo)

    def bwd(out):
        def run():
            g = out.grad
            _accum(wo, ctx.T @ g)
            _accum(bo, g.sum(axis=0, keepdims=True))
            d_ctx = g @ wo.data.T
            dq = np.empty_like(q)
            dk = np.empty_like(k)
            dv = np.empty_like(v)
            for i in range(h):
                sl = slice(i * dh, (i + 1) * dh)
                d_pd = d_ctx[:, sl] @ v[:, sl].T
                dv[:, sl] = dropped[i].T @ d_ctx[:, sl]
                d_p = d_pd * keep_masks[i] if use_dropout else d_pd
                p = probs[i]
                d_s = p * (d_p - (d_p * p).sum(axis=1, keepdims=True))
                d_s *= inv_sqrt
                dq[:, sl] = d_s @ k[:, sl]
                dk[:, sl] = d_s.T @ q[:, sl]
            _accum(wq, x.data.T @ dq)
            _accum(bq, dq.sum(axis=0, keepdims=True))
            _accum(wk, x.data.T @ dk)
            _accum(wv, x.data.T @ dv)
            _accum(bv, dv.sum(axis=0, keepdims=True))
            _accum(x, dq @ wq.data.T + dk @ wk.data.T + dv @ wv.data.T)

        return run

    return _node(out_data, parents, bwd)


def mean_pool_rows(x: Tensor2, row_mask: np.ndarray | None = None) -> Tensor2:
    """Mean over (valid) rows -> (1, D). ``row_mask`` is boolean, shape (N,)."""
    if row_mask is None:
        row_mask = np.ones(x.shape[0], dtype=bool)
    row_mask = np.asarray(row_mask, dtype=bool)
    count = float(row_mask.sum())
    if count < 1:
        raise ValueError("mean_pool_rows needs at least one valid row")
    weights = (row_mask.astype(x.dtype) / np.asarray(count, dtype=x.dtype)).reshape(-1, 1)

    def bwd(out):
        def run():
            _accum(x, weights * out.grad)

        return run

    return _node((x.data * weights).sum(axis=0, keepdims=True), (x,), bwd)


def tsum(parts: list[Tensor2]) -> Tensor2:
    """Elementwise sum of same-shape tensors (n-ary, one graph node)."""
    acc = parts[0].data.copy()
    for p in parts[1:]:
        acc += p.data

    def bwd(out):
        def run():
            for p in parts:
                _accum(p, out.grad)

        return run

    return _node(acc, tuple(parts), bwd)


def tmean(parts: list[Tensor2]) -> Tensor2:
    return scale(tsum(parts), 1.0 / len(parts))


def cross_entropy(logits: Tensor2, label: int) -> Tensor2:
    """-log softmax(logits)[label] for a (1, C) logit row, max-stabilized."""
    if logits.shape[0] != 1:
        raise ValueError(f"cross_entropy expects a (1, C) row, got {logits.shape}")
    if not 0 <= label < logits.shape[1]:
        raise ValueError(f"label {label} outside 0..{logits.shape[1] - 1}")
    z = logits.data
    m = z.max()
    e = np.exp(z - m)
    p = e / e.sum()
    loss = m + np.log(e.sum()) - z[0, label]  # stays in the graph dtype

    def bwd(out):
        def run():
            g = p.copy()
            g[0, label] -= 1.0
            _accum(logits, out.grad.reshape(()) * g)

        return run

    return _node(np.asarray(loss, dtype=z.dtype).reshape(1, 1), (logits,), bwd)


def mse(pred: Tensor2, target: float) -> Tensor2:
    """(pred - target)^2 for a scalar prediction."""
    if pred.data.size != 1:
        raise ValueError(f"mse expects a scalar prediction, got {pred.shape}")
    diff = pred.data - np.asarray(target, dtype=pred.dtype)

    def bwd(out):
        def run():
            _accum(pred, (2.0 * diff) * out.grad.reshape(1, 1))

        return run

    return _node(diff * diff, (pred,), bwd)
