"""Training loop: Adam with weight decay, linear LR schedule, balanced
cross-task batching, best-validation checkpointing, and multi-seed runs.

Every run is deterministic given (config, data, seed): parameter init,
dropout, and batch order all draw from generators derived from the seed.
Aggregation across seeds is a pure fold over per-seed results.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor2
from .corpus import Corpus, DialogueSample
from .evalreport import SeedAggregate, aggregate_seeds, f1_score, rmse
from .model import (
    ADModelParams,
    JointModelParams,
    ModelConfig,
    WeightedADParams,
    combined_loss,
    forward_ad,
    forward_joint,
    forward_weighted_ad,
)
from .nn import clip_grads, cross_entropy_loss, mse_loss
from .rngutil import derive_rng


class DivergenceError(RuntimeError):
    """Raised when a loss or gradient goes non-finite during training."""

    def __init__(self, message: str, seed=None, epoch=None, step=None):
        super().__init__(message)
        self.seed = seed
        self.epoch = epoch
        self.step = step


@dataclass
class TrainConfig:
    epochs: int = 30
    lr_start: float = 4e-5
    lr_end: float = 1e-5
    weight_decay: float = 5e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 16
    lambda_dep: float = 0.1
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    dropout_p: float = 0.2
    grad_clip: float | None = 5.0
    decoupled_weight_decay: bool = False
    track_train_f1: bool = True
    stop_at_train_f1: float | None = None  # early stop once train F1 reaches this
    block_weight_lr_scale: float = 1.0  # lr multiplier for block-combination logits

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr_start < 0 or self.lr_end < 0:
            raise ValueError("learning rates must be >= 0")
        if self.lr_end > self.lr_start:
            raise ValueError("lr_end must be <= lr_start")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if not self.seeds:
            raise ValueError("need at least one seed")

    def to_json(self) -> dict:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__}
        out["betas"] = list(self.betas)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        known = {k: v for k, v in obj.items() if k in cls.__dataclass_fields__}
        if "betas" in known:
            known["betas"] = tuple(known["betas"])
        if "seeds" in known:
            known["seeds"] = [int(s) for s in known["seeds"]]
        return cls(**known)


@dataclass
class TaskData:
    """One task's splits after pooling/augmentation, ready for training."""

    task: str
    train: list[DialogueSample]
    validation: list[DialogueSample]
    test: list[DialogueSample]

    @classmethod
    def from_corpus(cls, corpus: Corpus) -> "TaskData":
        return cls(
            task=corpus.task,
            train=corpus.train,
            validation=corpus.validation,
            test=corpus.test,
        )

    @property
    def feature_dim(self) -> int:
        for split in (self.train, self.validation, self.test):
            if split:
                return split[0].features.shape[-1]
        raise ValueError("empty task data")


@dataclass
class RunResult:
    """Per-seed outcome: best epoch, test metrics, per-epoch trace."""

    seed: int
    best_epoch: int
    test_f1: float | None = None
    test_rmse: float | None = None
    trace: list[dict] = field(default_factory=list)
    block_weights: list[float] | None = None
    # in-memory only; never serialized
    best_params: dict | None = field(default=None, repr=False, compare=False)

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "best_epoch": self.best_epoch,
            "test_f1": self.test_f1,
            "test_rmse": self.test_rmse,
            "block_weights": self.block_weights,
            "trace": self.trace,
        }


@dataclass
class RunReport:
    """Cross-seed report: per-seed results plus the aggregate block."""

    mode: str
    results: list[RunResult]
    aggregate: SeedAggregate
    config: dict

    def to_json(self) -> dict:
        return {
            "mode": self.mode,
            "config": self.config,
            "results": [r.to_json() for r in self.results],
            "aggregate": self.aggregate.to_json(),
        }


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Linear interpolation from lr_start (epoch 0) to lr_end (last epoch).

    Both endpoints are returned exactly (no roundoff through the formula).
    """
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs - 1}]")
    if cfg.epochs == 1 or epoch == 0:
        return cfg.lr_start
    if epoch == cfg.epochs - 1:
        return cfg.lr_end
    return cfg.lr_start + (cfg.lr_end - cfg.lr_start) * epoch / (cfg.epochs - 1)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def init(cls, params: dict[str, Tensor2]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
            step=0,
        )


def adam_step(
    params: dict[str, Tensor2],
    grads: dict[str, np.ndarray] | None,
    state: AdamState,
    lr: float,
    cfg: TrainConfig,
) -> None:
    """One Adam update with bias correction, in place.

    Weight decay is coupled L2 by default (g <- g + wd * theta before the
    moment updates); set ``decoupled_weight_decay`` for the decoupled
    variant. Parameters without a gradient are still decayed through their
    zero gradient in coupled mode (g = wd * theta), matching a plain L2
    penalty on all weights.
    """
    beta1, beta2 = cfg.betas
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads.get(name) if grads is not None else p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient in {name!r}", step=t)
        g = g.astype(p.dtype, copy=True)
        if cfg.weight_decay != 0.0 and not cfg.decoupled_weight_decay:
            g += cfg.weight_decay * p.data
        elif cfg.weight_decay != 0.0:
            p.data -= np.asarray(lr * cfg.weight_decay, dtype=p.dtype) * p.data
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        step_lr = lr * cfg.block_weight_lr_scale if name == "block_weights.logits" else lr
        p.data -= np.asarray(step_lr, dtype=p.dtype) * m_hat / (np.sqrt(v_hat) + cfg.eps)


def make_balanced_batches(
    ad_samples: list,
    dep_samples: list | None,
    batch_size: int,
    rng: np.random.Generator,
) -> list[list]:
    """Batches for one epoch.

    Joint mode: each full batch holds ceil(bs/2) ad + floor(bs/2)
    depression samples; the larger stream is consumed at most once, the
    smaller cycles (reshuffled on wrap). Single-task mode (``dep_samples``
    None): plain shuffled fixed-size batches.
    """
    if not ad_samples:
        raise ValueError("empty ad sample list")
    if dep_samples is None:
        order = rng.permutation(len(ad_samples))
        return [
            [ad_samples[i] for i in order[k : k + batch_size]]
            for k in range(0, len(order), batch_size)
        ]
    if not dep_samples:
        raise ValueError("empty depression sample list in joint mode")

    ad_quota = (batch_size + 1) // 2
    dep_quota = batch_size // 2
    ad_order = [ad_samples[i] for i in rng.permutation(len(ad_samples))]
    dep_order = [dep_samples[i] for i in rng.permutation(len(dep_samples))]

    def cycler(samples):
        while True:
            for i in rng.permutation(len(samples)):
                yield samples[i]

    if len(ad_order) / ad_quota >= len(dep_order) / dep_quota:
        driver, d_quota = ad_order, ad_quota
        follower = cycler(dep_order)
        f_quota = dep_quota
        ad_drives = True
    else:
        driver, d_quota = dep_order, dep_quota
        follower = cycler(ad_order)
        f_quota = ad_quota
        ad_drives = False

    batches = []
    pos = 0
    while pos < len(driver):
        take = min(d_quota, len(driver) - pos)
        drive_part = driver[pos : pos + take]
        pos += take
        if take == d_quota:
            f_take = f_quota
        else:
            f_take = min(f_quota, max(1, round(take * f_quota / d_quota)))
        follow_part = [next(follower) for _ in range(f_take)]
        batch = (drive_part + follow_part) if ad_drives else (follow_part + drive_part)
        batches.append(batch)
    return batches


def _forward_for(sample: DialogueSample, params, mode: str, training: bool, rng):
    if mode == "single":
        return forward_ad(sample, params, training=training, rng=rng)
    if mode == "weighted":
        return forward_weighted_ad(sample, params, training=training, rng=rng)
    raise ValueError(f"unknown mode {mode!r}")


def _sample_loss(output: Tensor2, sample: DialogueSample) -> Tensor2:
    if sample.source_task == "ad":
        return cross_entropy_loss(output, int(bool(sample.label.ad_positive)))
    return mse_loss(output, float(sample.label.depression_severity))


def _predict_ad(samples, params, mode: str) -> list[bool]:
    preds = []
    for s in samples:
        if mode == "joint":
            logits = forward_joint([s], params)[0].data
        else:
            logits = _forward_for(s, params, mode, False, None).data
        preds.append(bool(np.argmax(logits) == 1))
    return preds


def _predict_dep(samples, params) -> list[float]:
    return [float(forward_joint([s], params)[0].data[0, 0]) for s in samples]


def _snapshot(named: dict[str, Tensor2]) -> dict[str, np.ndarray]:
    return {k: p.data.copy() for k, p in named.items()}


def _restore(named: dict[str, Tensor2], snapshot: dict[str, np.ndarray]) -> None:
    for k, p in named.items():
        p.data = snapshot[k].copy()
        p.grad = None


def train_run(
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    ad_data: TaskData,
    dep_data: TaskData | None,
    seed: int,
    mode: str = "single",
) -> RunResult:
    """One seeded training run; returns metrics plus the best parameters.

    Modes: "single" (classification only), "joint" (shared encoder, both
    tasks, combined loss), "weighted" (single-task over learned block
    combination; samples carry (B, N, D) stacks). Model selection follows
    validation F1; the best checkpoint is then evaluated on test.
    """
    if mode not in ("single", "joint", "weighted"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "joint" and dep_data is None:
        raise ValueError("joint mode needs depression data")
    if not ad_data.train:
        raise ValueError("no training samples")

    init_rng = derive_rng(seed, "init")
    dropout_rng = derive_rng(seed, "dropout")
    batch_rng = derive_rng(seed, "batches")

    run_model_cfg = ModelConfig(**{**model_cfg.to_json(), "dropout_p": cfg.dropout_p})
    if mode == "single":
        params = ADModelParams.init(init_rng, ad_data.feature_dim, run_model_cfg)
    elif mode == "weighted":
        num_blocks = ad_data.train[0].features.shape[0]
        d = ad_data.train[0].features.shape[2]
        params = WeightedADParams.init(init_rng, num_blocks, d, run_model_cfg)
    else:
        params = JointModelParams.init(
            init_rng, ad_data.feature_dim, dep_data.feature_dim, run_model_cfg
        )
    named = params.named()
    state = AdamState.init(named)

    best_f1 = -1.0
    best_epoch = 0
    best_snapshot = _snapshot(named)
    trace: list[dict] = []

    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        dep_train = dep_data.train if (mode == "joint" and dep_data) else None
        batches = make_balanced_batches(ad_data.train, dep_train, cfg.batch_size, batch_rng)
        epoch_loss_ad = 0.0
        epoch_loss_dep = 0.0
        n_ad_batches = 0
        n_dep_batches = 0
        for step, batch in enumerate(batches):
            for p in named.values():
                p.zero_grad()
            if mode == "joint":
                outputs = forward_joint(batch, params, training=True, rng=dropout_rng)
            else:
                outputs = [
                    _forward_for(s, params, mode, True, dropout_rng) for s in batch
                ]
            ad_losses = [
                _sample_loss(o, s) for o, s in zip(outputs, batch) if s.source_task == "ad"
            ]
            dep_losses = [
                _sample_loss(o, s)
                for o, s in zip(outputs, batch)
                if s.source_task == "depression"
            ]
            if ad_losses and dep_losses:
                loss = combined_loss(
                    ad.tmean(ad_losses), ad.tmean(dep_losses), cfg.lambda_dep
                )
            elif ad_losses:
                loss = ad.tmean(ad_losses)
            else:
                loss = ad.scale(ad.tmean(dep_losses), cfg.lambda_dep)
            loss_value = loss.item()
            if not math.isfinite(loss_value):
                raise DivergenceError(
                    f"non-finite loss {loss_value} (seed {seed}, epoch {epoch + 1}, step {step})",
                    seed=seed,
                    epoch=epoch + 1,
                    step=step,
                )
            if ad_losses:
                epoch_loss_ad += sum(l.item() for l in ad_losses) / len(ad_losses)
                n_ad_batches += 1
            if dep_losses:
                epoch_loss_dep += sum(l.item() for l in dep_losses) / len(dep_losses)
                n_dep_batches += 1
            loss.backward()
            if cfg.grad_clip is not None and cfg.grad_clip > 0:
                clip_grads(named, cfg.grad_clip)
            try:
                adam_step(named, None, state, lr, cfg)
            except DivergenceError as exc:
                raise DivergenceError(
                    f"{exc} (seed {seed}, epoch {epoch + 1}, step {step})",
                    seed=seed,
                    epoch=epoch + 1,
                    step=step,
                ) from None

        row = {"epoch": epoch + 1, "lr": lr}
        if n_ad_batches:
            row["train_loss_ad"] = epoch_loss_ad / n_ad_batches
        if n_dep_batches:
            row["train_loss_dep"] = epoch_loss_dep / n_dep_batches
        if cfg.track_train_f1:
            train_preds = _predict_ad(ad_data.train, params, mode)
            row["train_f1"] = f1_score(
                train_preds, [bool(s.label.ad_positive) for s in ad_data.train]
            )
        val_preds = _predict_ad(ad_data.validation, params, mode)
        val_f1 = f1_score(val_preds, [bool(s.label.ad_positive) for s in ad_data.validation])
        row["val_f1"] = val_f1
        if mode == "joint" and dep_data and dep_data.validation:
            val_rmse = rmse(
                _predict_dep(dep_data.validation, params),
                [float(s.label.depression_severity) for s in dep_data.validation],
            )
            row["val_rmse"] = val_rmse
        trace.append(row)
        if val_f1 > best_f1:
            best_f1 = val_f1
            best_epoch = epoch + 1
            best_snapshot = _snapshot(named)
        if (
            cfg.stop_at_train_f1 is not None
            and row.get("train_f1") is not None
            and row["train_f1"] >= cfg.stop_at_train_f1
        ):
            break

    _restore(named, best_snapshot)
    test_preds = _predict_ad(ad_data.test, params, mode)
    test_f1 = f1_score(test_preds, [bool(s.label.ad_positive) for s in ad_data.test])
    test_rmse = None
    if mode == "joint" and dep_data and dep_data.test:
        test_rmse = rmse(
            _predict_dep(dep_data.test, params),
            [float(s.label.depression_severity) for s in dep_data.test],
        )
    block_weights = None
    if mode == "weighted":
        block_weights = [float(w) for w in params.weights.softmax_weights()]
    return RunResult(
        seed=seed,
        best_epoch=best_epoch,
        test_f1=test_f1,
        test_rmse=test_rmse,
        trace=trace,
        block_weights=block_weights,
        best_params=best_snapshot,
    )


def worker_count(n_tasks: int) -> int:
    """Worker cap from XFERLAB_THREADS (default 1 = sequential)."""
    raw = os.environ.get("XFERLAB_THREADS", "1")
    try:
        cap = max(1, int(raw))
    except ValueError:
        cap = 1
    return min(cap, n_tasks)


def multi_seed(
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    ad_data: TaskData,
    dep_data: TaskData | None,
    mode: str = "single",
) -> RunReport:
    """Run train_run per seed and aggregate F1/RMSE statistics.

    Seeds are independent workers with no shared state; failures propagate
    with the offending seed identified.
    """

    def run_one(seed: int) -> RunResult:
        try:
            return train_run(cfg, model_cfg, ad_data, dep_data, seed, mode)
        except DivergenceError as exc:
            raise DivergenceError(f"seed {seed}: {exc}", seed=seed) from exc

    workers = worker_count(len(cfg.seeds))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_one, cfg.seeds))
    else:
        results = [run_one(seed) for seed in cfg.seeds]
    return RunReport(
        mode=mode,
        results=results,
        aggregate=aggregate_seeds(results),
        config={"train": cfg.to_json(), "model": model_cfg.to_json()},
    )
