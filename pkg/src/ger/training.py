"""Bidirectional in-batch contrastive training."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .autodiff import ShapeError, Tensor
from .data import Example
from .model import BiEncoder


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    warmup: float = 0.1
    epochs: int = 5
    batch_size: int = 16
    seed: int = 0
    ratio: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not 0 < self.ratio <= 1:
            raise ValueError(f"ratio must lie in (0, 1], got {self.ratio}")
        if self.lr < 0 or self.weight_decay < 0 or self.clip_norm <= 0 or not 0 <= self.warmup <= 1:
            raise ValueError("invalid optimizer settings")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")


@dataclass(frozen=True)
class Pair:
    mention: Example
    entity: Example
    entity_id: str


def in_batch_loss(S: Tensor) -> Tensor:
    """Mean over i of the row-softmax and column-softmax losses of gold pair (i, i)."""
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ShapeError(f"loss: score matrix must be square, got {S.shape}")
    n = S.shape[0]
    diag = ad.sum_(ad.mul(S, np.eye(n)), axis=1)
    rows = ad.logsumexp(S, axis=1)
    cols = ad.logsumexp(S, axis=0)
    per_pair = ad.sub(ad.add(rows, cols), ad.scale(diag, 2.0))
    return ad.mean(per_pair)


def loss_value(S) -> float:
    with ad.no_grad():
        return float(in_batch_loss(ad.as_tensor(S)).data)


class AdamW:
    """Adaptive moments with decoupled weight decay."""

    def __init__(self, params: dict[str, Tensor], cfg: TrainConfig, no_decay: Sequence[str] = ()):
        self.params = params
        self.cfg = cfg
        self.no_decay = {k for k in params if any(k.endswith(s) for s in no_decay)}
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1 - c.beta1**self.t
        bc2 = 1 - c.beta2**self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = c.beta1 * self.m[k] + (1 - c.beta1) * g
            self.v[k] = c.beta2 * self.v[k] + (1 - c.beta2) * g * g
            if lr == 0:
                continue
            if k not in self.no_decay and c.weight_decay:
                p.data = p.data - lr * c.weight_decay * p.data
            p.data = p.data - lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + c.eps)


def global_grad_norm(params: dict[str, Tensor]) -> float:
    return math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params.values() if p.grad is not None))


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale gradients so their global norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = global_grad_norm(params)
    if norm > max_norm:
        factor = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * factor
    return norm


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup over the first ``warmup`` fraction of steps, constant after."""
    warm = math.ceil(cfg.warmup * total_steps)
    if warm and step < warm:
        return cfg.lr * (step + 1) / warm
    return cfg.lr


def make_batches(pairs: Sequence[Pair], batch_size: int, rng: np.random.Generator) -> list[list[Pair]]:
    """Shuffle, then fill batches while deferring repeats of an entity already in the batch."""
    order = [pairs[i] for i in rng.permutation(len(pairs))]
    batches: list[list[Pair]] = []
    pending = order
    while pending:
        batch, seen, deferred = [], set(), []
        for p in pending:
            if len(batch) < batch_size and p.entity_id not in seen:
                batch.append(p)
                seen.add(p.entity_id)
            else:
                deferred.append(p)
        batches.append(batch)
        pending = deferred
    return batches


def subset(pairs: Sequence[Pair], ratio: float, seed: int) -> list[Pair]:
    """Deterministic ``ceil(ratio * n)`` subset, kept in corpus order."""
    n = len(pairs)
    m = math.ceil(ratio * n)
    if m >= n:
        return list(pairs)
    keep = np.sort(np.random.default_rng([seed, 7]).permutation(n)[:m])
    return [pairs[i] for i in keep]


def train_step(
    model: BiEncoder,
    batch: Sequence[Pair],
    opt: AdamW,
    cfg: TrainConfig,
    lr: float,
) -> tuple[float, float]:
    """One update; returns (loss, pre-clip gradient norm)."""
    params = opt.params
    ad.zero_grads(params.values())
    S = model.batch_scores([p.mention for p in batch], [p.entity for p in batch])
    loss = in_batch_loss(S)
    value = float(loss.data)
    if not math.isfinite(value):
        raise TrainingError(
            f"non-finite loss {value}; score range [{S.data.min():.3g}, {S.data.max():.3g}], "
            f"batch ids {[p.mention.id for p in batch][:8]}"
        )
    ad.backward(loss)
    norm = clip_grad_norm(params, cfg.clip_norm)
    opt.step(lr)
    return value, norm


@dataclass
class TrainResult:
    model: BiEncoder
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)

    def write_log(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.steps + self.epochs:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def train(
    model: BiEncoder,
    pairs: Sequence[Pair],
    cfg: TrainConfig,
    evaluate: Callable[[BiEncoder], dict] | None = None,
    log: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Run ``cfg.epochs`` passes of in-batch training over a seeded subset of ``pairs``.

    ``evaluate`` is called after each epoch and its result (e.g. validation
    recall) is stored with the epoch summary.
    """
    if not pairs:
        raise TrainingError("empty training corpus")
    used = subset(pairs, cfg.ratio, cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    params = model.trainable()
    opt = AdamW(params, cfg, no_decay=("lambda",))
    # batch plans are drawn up front so the schedule knows the total step count
    plans = [make_batches(used, cfg.batch_size, rng) for _ in range(cfg.epochs)]
    total = sum(len(p) for p in plans)
    result = TrainResult(model)
    step = 0
    for epoch, batches in enumerate(plans):
        losses = []
        for batch in batches:
            lr = lr_at(step, total, cfg)
            loss, norm = train_step(model, batch, opt, cfg, lr)
            rec = {"step": step, "epoch": epoch, "loss": loss, "lr": lr, "grad_norm": norm}
            result.steps.append(rec)
            if log:
                log(rec)
            losses.append(loss)
            step += 1
        summary = {"epoch": epoch, "mean_loss": float(np.mean(losses)), "pairs": len(used)}
        if evaluate is not None:
            summary["validation"] = evaluate(model)
        result.epochs.append(summary)
        if log:
            log(summary)
    return result


def save_model(path: str | Path, model: BiEncoder, cfg: TrainConfig | None = None, extra: dict | None = None) -> str:
    meta = model.meta()
    if cfg is not None:
        meta["train"] = asdict(cfg)
    if extra:
        meta.update(extra)
    return checkpoint.save(path, model.state_dict(), meta)


def load_model(path: str | Path) -> tuple[BiEncoder, dict]:
    tensors, meta = checkpoint.load(path)
    return BiEncoder.from_checkpoint(tensors, meta), meta
