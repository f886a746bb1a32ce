"""Neural building blocks on top of the autodiff kernel.

Post-norm Transformer encoder block (multi-head self-attention + two-layer
feed-forward, layer norm after each residual add), the two task losses,
seeded Xavier initialization, and a central-difference gradient checker.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor2

LAYERNORM_EPS = 1e-5


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> Tensor2:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    data = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)
    return Tensor2(data, requires_grad=True)


def zeros_param(rows: int, cols: int, dtype) -> Tensor2:
    return Tensor2(np.zeros((rows, cols), dtype=dtype), requires_grad=True)


def ones_param(rows: int, cols: int, dtype) -> Tensor2:
    return Tensor2(np.ones((rows, cols), dtype=dtype), requires_grad=True)


@dataclass
class EncoderBlockParams:
    """Weights of one encoder block (d_model input/output, H heads).

    Attention projections are stored full-width; heads are views of
    contiguous column groups of width d_model // H.
    """

    wq: Tensor2
    bq: Tensor2
    wk: Tensor2
    wv: Tensor2
    bv: Tensor2
    wo: Tensor2
    bo: Tensor2
    w1: Tensor2
    b1: Tensor2
    w2: Tensor2
    b2: Tensor2
    ln1_gain: Tensor2
    ln1_bias: Tensor2
    ln2_gain: Tensor2
    ln2_bias: Tensor2
    num_heads: int

    def __post_init__(self):
        d = self.wq.shape[0]
        if d % self.num_heads != 0:
            raise ValueError(f"d_model {d} not divisible by {self.num_heads} heads")

    @property
    def d_model(self) -> int:
        return self.wq.shape[0]

    @property
    def d_ff(self) -> int:
        return self.w1.shape[1]

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        d_model: int,
        num_heads: int,
        d_ff: int | None = None,
        dtype=ad.DEFAULT_DTYPE,
    ) -> "EncoderBlockParams":
        if d_ff is None:
            d_ff = 4 * d_model
        return cls(
            wq=xavier_uniform(rng, d_model, d_model, dtype),
            bq=zeros_param(1, d_model, dtype),
            wk=xavier_uniform(rng, d_model, d_model, dtype),
            wv=xavier_uniform(rng, d_model, d_model, dtype),
            bv=zeros_param(1, d_model, dtype),
            wo=xavier_uniform(rng, d_model, d_model, dtype),
            bo=zeros_param(1, d_model, dtype),
            w1=xavier_uniform(rng, d_model, d_ff, dtype),
            b1=zeros_param(1, d_ff, dtype),
            w2=xavier_uniform(rng, d_ff, d_model, dtype),
            b2=zeros_param(1, d_model, dtype),
            ln1_gain=ones_param(1, d_model, dtype),
            ln1_bias=zeros_param(1, d_model, dtype),
            ln2_gain=ones_param(1, d_model, dtype),
            ln2_bias=zeros_param(1, d_model, dtype),
            num_heads=num_heads,
        )

    _FIELD_NAMES = (
        "wq", "bq", "wk", "wv", "bv", "wo", "bo",
        "w1", "b1", "w2", "b2",
        "ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias",
    )

    def named(self, prefix: str = "") -> dict[str, Tensor2]:
        return {f"{prefix}{name}": getattr(self, name) for name in self._FIELD_NAMES}

    @classmethod
    def from_named(
        cls, named: dict[str, Tensor2], num_heads: int, prefix: str = ""
    ) -> "EncoderBlockParams":
        """Rebuild a block view over existing tensors (shares, not copies)."""
        return cls(**{f: named[f"{prefix}{f}"] for f in cls._FIELD_NAMES}, num_heads=num_heads)


def encoder_block_forward(
    x: Tensor2,
    params: EncoderBlockParams,
    mask: np.ndarray | None = None,
    dropout_p: float = 0.0,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor2:
    """One post-norm encoder block over an (N, d_model) sequence.

    ``mask`` flags valid rows; invalid rows are excluded from attention via
    additive -inf on their key columns and zeroed in the output. Dropout
    (train only) acts on the attention weights and inside the feed-forward.
    """
    n, d_model = x.shape
    if d_model != params.d_model:
        raise ValueError(f"input dim {d_model} != block d_model {params.d_model}")
    if mask is None:
        mask = np.ones(n, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (n,):
        raise ValueError(f"mask shape {mask.shape} != ({n},)")
    if not mask.any():
        raise ValueError("all rows masked")
    if training and dropout_p > 0.0 and rng is None:
        raise ValueError("training-mode dropout needs an rng")

    # fused attention node; no key bias (softmax is invariant to uniform
    # key-logit shifts, so it would be a dead parameter)
    attn = ad.multi_head_self_attention(
        x,
        params.wq,
        params.bq,
        params.wk,
        params.wv,
        params.bv,
        params.wo,
        params.bo,
        num_heads=params.num_heads,
        key_mask=mask,
        dropout_p=dropout_p,
        training=training,
        rng=rng,
    )

    x1 = ad.layer_norm_rows(ad.add(x, attn), params.ln1_gain, params.ln1_bias, LAYERNORM_EPS)

    hidden = ad.relu(ad.linear(x1, params.w1, params.b1))
    if training and dropout_p > 0.0:
        hidden = ad.dropout(hidden, dropout_p, training, rng)
    ff = ad.linear(hidden, params.w2, params.b2)

    out = ad.layer_norm_rows(ad.add(x1, ff), params.ln2_gain, params.ln2_bias, LAYERNORM_EPS)

    if mask.all():
        return out
    keep = mask.astype(x.dtype).reshape(n, 1)
    return ad.mul(out, ad.as_tensor(keep))


def cross_entropy_loss(logits: Tensor2 | np.ndarray, label: int) -> Tensor2:
    """-log softmax(logits)[label] for a two-class (or C-class) logit row."""
    return ad.cross_entropy(ad.as_tensor(logits), int(label))


def mse_loss(pred: Tensor2 | float, target: float) -> Tensor2:
    return ad.mse(ad.as_tensor(pred), float(target))


def clone_params(params: dict[str, Tensor2], dtype=None) -> dict[str, Tensor2]:
    """Deep-copy a named parameter dict, optionally casting dtype."""
    out = {}
    for name, p in params.items():
        data = p.data.astype(dtype) if dtype is not None else p.data.copy()
        out[name] = Tensor2(data, requires_grad=p.requires_grad)
    return out


def grad_check(
    make_loss,
    params: dict[str, Tensor2],
    eps: float = 1e-4,
    fd_dtype=np.longdouble,
) -> float:
    """Max relative error between reverse-mode and central-difference grads.

    ``make_loss(params)`` must rebuild the scalar loss from the given
    parameter dict and be deterministic (dropout off); non-deterministic
    functions are rejected. Relative error is |a - n| / max(|a|, |n|, 1e-8),
    maximized over all parameter entries.

    The difference oracle runs at extended precision by default: with the
    1e-8 denominator floor, plain f64 central differences carry enough
    rounding noise (~1e-11 absolute) to fail tight thresholds on
    small-magnitude gradients even when the analytic side is exact.
    """

    def scalar(t: Tensor2):
        return t.data.reshape(())[()]  # numpy scalar, keeps fd_dtype

    base1 = scalar(make_loss(params))
    base2 = scalar(make_loss(params))
    if base1 != base2:
        raise ValueError("make_loss is not deterministic (is dropout disabled?)")

    for p in params.values():
        p.zero_grad()
    loss = make_loss(params)
    loss.backward()
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }

    fd_params = clone_params(params, dtype=fd_dtype)
    max_err = 0.0
    for name, p in fd_params.items():
        flat = p.data.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        for i in range(flat.size):
            theta = flat[i]
            h = eps * max(1.0, abs(float(theta)))
            flat[i] = theta + h
            f_plus = scalar(make_loss(fd_params))
            flat[i] = theta - h
            f_minus = scalar(make_loss(fd_params))
            flat[i] = theta
            numeric = float((f_plus - f_minus) / (2.0 * h))
            a = float(a_flat[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            if err > max_err:
                max_err = err
    return max_err


def global_grad_norm(params: dict[str, Tensor2]) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    return math.sqrt(total)


def clip_grads(params: dict[str, Tensor2], max_norm: float) -> float:
    """Scale all gradients so their global norm is at most ``max_norm``."""
    norm = global_grad_norm(params)
    if norm > max_norm > 0:
        factor = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= np.asarray(factor, dtype=p.grad.dtype)
    return norm
