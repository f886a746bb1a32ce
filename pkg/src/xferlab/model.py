"""Downstream dialogue models.

Three architectures over pooled utterance sequences:

* single-task classifier: input projection -> sinusoidal positions ->
  stacked encoder blocks -> masked mean pool -> two FC layers -> 2 logits;
* the same classifier fed by a learned softmax-weighted combination of
  per-block feature stacks (for locating informative encoder depths);
* a two-task network with per-task dimension reduction, one shared encoder
  block, and per-task output heads (2-logit classification head and scalar
  severity regression head) trained jointly.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor2
from .corpus import DialogueSample
from .nn import EncoderBlockParams, encoder_block_forward, xavier_uniform, zeros_param


@dataclass
class ModelConfig:
    d_model: int = 128
    num_heads: int = 4
    d_ff: int = 512
    fc_hidden: int = 64
    num_encoder_blocks: int = 2
    dropout_p: float = 0.2
    use_positional: bool = True
    num_blocks_weighted: int = 12  # expected block count for weighted combination

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        known = {k: v for k, v in obj.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@lru_cache(maxsize=64)
def _position_table(n: int, d: int, dtype_name: str) -> np.ndarray:
    pos = np.arange(n, dtype=np.float64)[:, None]
    i = np.arange(d, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, 2.0 * np.floor(i / 2.0) / d)
    table = np.where(i % 2 == 0, np.sin(angles), np.cos(angles))
    table = table.astype(dtype_name)
    table.flags.writeable = False
    return table


def positional_encoding(n: int, d: int, dtype) -> np.ndarray:
    """Interleaved sin/cos table of shape (n, d)."""
    return _position_table(n, d, np.dtype(dtype).name)


@dataclass
class ADModelParams:
    """Single-task classifier weights."""

    proj_w: Tensor2
    proj_b: Tensor2
    blocks: list[EncoderBlockParams]
    fc1_w: Tensor2
    fc1_b: Tensor2
    fc2_w: Tensor2
    fc2_b: Tensor2
    cfg: ModelConfig

    @property
    def d_in(self) -> int:
        return self.proj_w.shape[0]

    @classmethod
    def init(
        cls, rng: np.random.Generator, d_in: int, cfg: ModelConfig, dtype=ad.DEFAULT_DTYPE
    ) -> "ADModelParams":
        return cls(
            proj_w=xavier_uniform(rng, d_in, cfg.d_model, dtype),
            proj_b=zeros_param(1, cfg.d_model, dtype),
            blocks=[
                EncoderBlockParams.init(rng, cfg.d_model, cfg.num_heads, cfg.d_ff, dtype)
                for _ in range(cfg.num_encoder_blocks)
            ],
            fc1_w=xavier_uniform(rng, cfg.d_model, cfg.fc_hidden, dtype),
            fc1_b=zeros_param(1, cfg.fc_hidden, dtype),
            fc2_w=xavier_uniform(rng, cfg.fc_hidden, 2, dtype),
            fc2_b=zeros_param(1, 2, dtype),
            cfg=cfg,
        )

    def named(self) -> dict[str, Tensor2]:
        out = {"proj.w": self.proj_w, "proj.b": self.proj_b}
        for i, block in enumerate(self.blocks):
            out.update(block.named(prefix=f"enc{i}."))
        out.update(
            {"fc1.w": self.fc1_w, "fc1.b": self.fc1_b, "fc2.w": self.fc2_w, "fc2.b": self.fc2_b}
        )
        return out

    @classmethod
    def from_named(cls, named: dict[str, Tensor2], cfg: ModelConfig) -> "ADModelParams":
        """View over an existing named tensor dict (shares, not copies)."""
        return cls(
            proj_w=named["proj.w"],
            proj_b=named["proj.b"],
            blocks=[
                EncoderBlockParams.from_named(named, cfg.num_heads, prefix=f"enc{i}.")
                for i in range(cfg.num_encoder_blocks)
            ],
            fc1_w=named["fc1.w"],
            fc1_b=named["fc1.b"],
            fc2_w=named["fc2.w"],
            fc2_b=named["fc2.b"],
            cfg=cfg,
        )

    def param_count(self) -> int:
        return sum(p.data.size for p in self.named().values())


def ad_param_count_closed_form(d_in: int, cfg: ModelConfig) -> int:
    """Closed-form size of ADModelParams as a function of the input dim."""
    dm, dff, fc = cfg.d_model, cfg.d_ff, cfg.fc_hidden
    per_block = (
        4 * dm * dm  # wq wk wv wo
        + 3 * dm  # bq bv bo (no key bias)
        + dm * dff + dff + dff * dm + dm  # feed-forward
        + 4 * dm  # two layer norms
    )
    return (
        d_in * dm + dm
        + cfg.num_encoder_blocks * per_block
        + dm * fc + fc
        + fc * 2 + 2
    )


def _encode_sequence(
    features: np.ndarray | Tensor2,
    proj_w: Tensor2,
    proj_b: Tensor2,
    blocks: list[EncoderBlockParams],
    cfg: ModelConfig,
    mask: np.ndarray | None,
    training: bool,
    rng: np.random.Generator | None,
) -> Tensor2:
    """Shared trunk: project rows, add positions, run blocks, mean-pool.

    ``features`` may already live in the graph (learned block combination).
    """
    n = features.shape[0]
    if n < 1:
        raise ValueError("dialogue has no utterances")
    if not isinstance(features, Tensor2):
        features = ad.as_tensor(features.astype(proj_w.dtype))
    x = ad.linear(features, proj_w, proj_b)
    if cfg.use_positional:
        x = ad.add(x, ad.as_tensor(positional_encoding(n, cfg.d_model, proj_w.dtype)))
    for block in blocks:
        x = encoder_block_forward(
            x, block, mask=mask, dropout_p=cfg.dropout_p, training=training, rng=rng
        )
    return ad.mean_pool_rows(x, mask)


def forward_ad(
    sample: DialogueSample | np.ndarray,
    params: ADModelParams,
    training: bool = False,
    rng: np.random.Generator | None = None,
    mask: np.ndarray | None = None,
) -> Tensor2:
    """Two-class logits (1, 2) for one dialogue."""
    features = sample.features if isinstance(sample, DialogueSample) else sample
    if features.ndim != 2:
        raise ValueError(f"expected (N, D) features, got shape {features.shape}")
    if features.shape[1] != params.d_in:
        raise ValueError(f"feature dim {features.shape[1]} != projection dim {params.d_in}")
    pooled = _encode_sequence(
        features, params.proj_w, params.proj_b, params.blocks, params.cfg, mask, training, rng
    )
    hidden = ad.relu(ad.linear(pooled, params.fc1_w, params.fc1_b))
    return ad.linear(hidden, params.fc2_w, params.fc2_b)


@dataclass
class BlockWeights:
    """Trainable logits over feature blocks; softmax makes them convex."""

    logits: Tensor2

    @classmethod
    def init(cls, num_blocks: int, dtype=ad.DEFAULT_DTYPE) -> "BlockWeights":
        return cls(logits=zeros_param(1, num_blocks, dtype))

    @property
    def num_blocks(self) -> int:
        return self.logits.shape[1]

    def softmax_weights(self) -> np.ndarray:
        z = self.logits.data - self.logits.data.max()
        e = np.exp(z)
        return (e / e.sum()).reshape(-1)


def weighted_block_combine(
    block_features: list[np.ndarray] | np.ndarray, weights: BlockWeights
) -> Tensor2:
    """Softmax(logits)-weighted sum of B same-shape (N, D) blocks.

    The weights participate in the graph, so they train with the rest of
    the downstream model.
    """
    if isinstance(block_features, np.ndarray):
        stack = block_features
    else:
        stack = np.stack([np.asarray(b) for b in block_features])
    if stack.ndim != 3:
        raise ValueError(f"expected (B, N, D) blocks, got shape {stack.shape}")
    b, n, d = stack.shape
    if b != weights.num_blocks:
        raise ValueError(f"got {b} blocks but weights expect {weights.num_blocks}")
    w = ad.softmax_rows(weights.logits)  # (1, B)
    flat = ad.as_tensor(stack.reshape(b, n * d).astype(weights.logits.dtype))
    return ad.reshape(ad.matmul(w, flat), n, d)


@dataclass
class WeightedADParams:
    """Block-combination weights plus the downstream classifier."""

    weights: BlockWeights
    model: ADModelParams

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        num_blocks: int,
        d: int,
        cfg: ModelConfig,
        dtype=ad.DEFAULT_DTYPE,
    ) -> "WeightedADParams":
        return cls(
            weights=BlockWeights.init(num_blocks, dtype),
            model=ADModelParams.init(rng, d, cfg, dtype),
        )

    def named(self) -> dict[str, Tensor2]:
        out = {"block_weights.logits": self.weights.logits}
        out.update(self.model.named())
        return out

    @classmethod
    def from_named(cls, named: dict[str, Tensor2], cfg: ModelConfig) -> "WeightedADParams":
        return cls(
            weights=BlockWeights(logits=named["block_weights.logits"]),
            model=ADModelParams.from_named(named, cfg),
        )


def forward_weighted_ad(
    sample: DialogueSample | np.ndarray,
    params: WeightedADParams,
    training: bool = False,
    rng: np.random.Generator | None = None,
    mask: np.ndarray | None = None,
) -> Tensor2:
    """Classifier logits from a (B, N, D) per-block feature stack."""
    features = sample.features if isinstance(sample, DialogueSample) else sample
    combined = weighted_block_combine(features, params.weights)
    m = params.model
    pooled = _encode_sequence(
        combined, m.proj_w, m.proj_b, m.blocks, m.cfg, mask, training, rng
    )
    hidden = ad.relu(ad.linear(pooled, m.fc1_w, m.fc1_b))
    return ad.linear(hidden, m.fc2_w, m.fc2_b)


@dataclass
class JointModelParams:
    """Two-task network: per-task reduction, shared encoder, per-task heads."""

    ad_reduce_w: Tensor2
    ad_reduce_b: Tensor2
    dep_reduce_w: Tensor2
    dep_reduce_b: Tensor2
    shared: EncoderBlockParams
    ad_fc1_w: Tensor2
    ad_fc1_b: Tensor2
    ad_fc2_w: Tensor2
    ad_fc2_b: Tensor2
    dep_fc1_w: Tensor2
    dep_fc1_b: Tensor2
    dep_fc2_w: Tensor2
    dep_fc2_b: Tensor2
    cfg: ModelConfig

    @property
    def ad_d_in(self) -> int:
        return self.ad_reduce_w.shape[0]

    @property
    def dep_d_in(self) -> int:
        return self.dep_reduce_w.shape[0]

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        ad_d_in: int,
        dep_d_in: int,
        cfg: ModelConfig,
        dtype=ad.DEFAULT_DTYPE,
    ) -> "JointModelParams":
        return cls(
            ad_reduce_w=xavier_uniform(rng, ad_d_in, cfg.d_model, dtype),
            ad_reduce_b=zeros_param(1, cfg.d_model, dtype),
            dep_reduce_w=xavier_uniform(rng, dep_d_in, cfg.d_model, dtype),
            dep_reduce_b=zeros_param(1, cfg.d_model, dtype),
            shared=EncoderBlockParams.init(rng, cfg.d_model, cfg.num_heads, cfg.d_ff, dtype),
            ad_fc1_w=xavier_uniform(rng, cfg.d_model, cfg.fc_hidden, dtype),
            ad_fc1_b=zeros_param(1, cfg.fc_hidden, dtype),
            ad_fc2_w=xavier_uniform(rng, cfg.fc_hidden, 2, dtype),
            ad_fc2_b=zeros_param(1, 2, dtype),
            dep_fc1_w=xavier_uniform(rng, cfg.d_model, cfg.fc_hidden, dtype),
            dep_fc1_b=zeros_param(1, cfg.fc_hidden, dtype),
            dep_fc2_w=xavier_uniform(rng, cfg.fc_hidden, 1, dtype),
            dep_fc2_b=zeros_param(1, 1, dtype),
            cfg=cfg,
        )

    def named(self) -> dict[str, Tensor2]:
        out = {
            "ad_reduce.w": self.ad_reduce_w,
            "ad_reduce.b": self.ad_reduce_b,
            "dep_reduce.w": self.dep_reduce_w,
            "dep_reduce.b": self.dep_reduce_b,
        }
        out.update(self.shared.named(prefix="shared."))
        out.update(
            {
                "ad_fc1.w": self.ad_fc1_w,
                "ad_fc1.b": self.ad_fc1_b,
                "ad_fc2.w": self.ad_fc2_w,
                "ad_fc2.b": self.ad_fc2_b,
                "dep_fc1.w": self.dep_fc1_w,
                "dep_fc1.b": self.dep_fc1_b,
                "dep_fc2.w": self.dep_fc2_w,
                "dep_fc2.b": self.dep_fc2_b,
            }
        )
        return out

    def shared_named(self) -> dict[str, Tensor2]:
        return self.shared.named(prefix="shared.")

    @classmethod
    def from_named(cls, named: dict[str, Tensor2], cfg: ModelConfig) -> "JointModelParams":
        return cls(
            ad_reduce_w=named["ad_reduce.w"],
            ad_reduce_b=named["ad_reduce.b"],
            dep_reduce_w=named["dep_reduce.w"],
            dep_reduce_b=named["dep_reduce.b"],
            shared=EncoderBlockParams.from_named(named, cfg.num_heads, prefix="shared."),
            ad_fc1_w=named["ad_fc1.w"],
            ad_fc1_b=named["ad_fc1.b"],
            ad_fc2_w=named["ad_fc2.w"],
            ad_fc2_b=named["ad_fc2.b"],
            dep_fc1_w=named["dep_fc1.w"],
            dep_fc1_b=named["dep_fc1.b"],
            dep_fc2_w=named["dep_fc2.w"],
            dep_fc2_b=named["dep_fc2.b"],
            cfg=cfg,
        )


def forward_joint(
    batch: list[DialogueSample],
    params: JointModelParams,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> list[Tensor2]:
    """Per-sample outputs: (1, 2) logits for ad samples, (1, 1) severity
    prediction for depression samples, in batch order."""
    cfg = params.cfg
    outputs: list[Tensor2] = []
    for sample in batch:
        if sample.source_task == "ad":
            reduce_w, reduce_b = params.ad_reduce_w, params.ad_reduce_b
            fc1_w, fc1_b = params.ad_fc1_w, params.ad_fc1_b
            fc2_w, fc2_b = params.ad_fc2_w, params.ad_fc2_b
        elif sample.source_task == "depression":
            reduce_w, reduce_b = params.dep_reduce_w, params.dep_reduce_b
            fc1_w, fc1_b = params.dep_fc1_w, params.dep_fc1_b
            fc2_w, fc2_b = params.dep_fc2_w, params.dep_fc2_b
        else:
            raise ValueError(f"unknown source_task {sample.source_task!r}")
        features = sample.features
        if features.shape[1] != reduce_w.shape[0]:
            raise ValueError(
                f"{sample.source_task} feature dim {features.shape[1]} != "
                f"reduction dim {reduce_w.shape[0]}"
            )
        x = ad.linear(ad.as_tensor(features.astype(reduce_w.dtype)), reduce_w, reduce_b)
        if cfg.use_positional:
            x = ad.add(
                x,
                ad.as_tensor(positional_encoding(features.shape[0], cfg.d_model, reduce_w.dtype)),
            )
        x = encoder_block_forward(
            x, params.shared, dropout_p=cfg.dropout_p, training=training, rng=rng
        )
        pooled = ad.mean_pool_rows(x)
        hidden = ad.relu(ad.linear(pooled, fc1_w, fc1_b))
        outputs.append(ad.linear(hidden, fc2_w, fc2_b))
    return outputs


def combined_loss(loss_ad, loss_dep, lam: float):
    """loss_ad + lam * loss_dep; works on graph tensors and plain floats."""
    if isinstance(loss_ad, Tensor2) or isinstance(loss_dep, Tensor2):
        return ad.add(ad.as_tensor(loss_ad), ad.scale(ad.as_tensor(loss_dep), lam))
    return loss_ad + lam * loss_dep
