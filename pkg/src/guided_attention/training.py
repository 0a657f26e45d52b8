"""Mini-batch training with momentum SGD."""

from __future__ import annotations

import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Sequence

import numpy as np
from tqdm import tqdm

from .config import OptimizerConfig, RunConfig
from .errors import InputError, NumericError
from .metrics import exprate
from .model import GuidedAttentionModel
from .serialization import save_checkpoint
from .synth import ExprSample, scale_augment
from .tensor import Tensor

logger = logging.getLogger(__name__)


class SGD:
    """``v ← μv + (g + λp)``; ``p ← p − ηv``."""

    def __init__(self, params: Sequence[Tensor], cfg: OptimizerConfig) -> None:
        self.params = list(params)
        self.cfg = cfg
        self._velocity: Dict[int, np.ndarray] = {}

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        cfg = self.cfg
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            grad = p.grad + cfg.weight_decay * p.data if cfg.weight_decay else p.grad
            if cfg.momentum:
                velocity = self._velocity.get(i)
                velocity = grad.copy() if velocity is None else cfg.momentum * velocity + grad
                self._velocity[i] = velocity
                grad = velocity
            p.data -= cfg.lr * grad


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """

    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
    if total > max_norm > 0:
        factor = max_norm / (total + 1e-12)
        for g in grads:
            g *= factor
    return total


@dataclass(slots=True)
class EpochStats:
    epoch: int
    loss: float
    val_exprate: float | None


@dataclass(slots=True)
class TrainResult:
    history: List[EpochStats] = field(default_factory=list)
    best_epoch: int | None = None
    best_score: float = float("-inf")

    @property
    def final_loss(self) -> float:
        return self.history[-1].loss if self.history else float("nan")


def iterate_batches(count: int, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    order = rng.permutation(count)
    return [order[i : i + batch_size] for i in range(0, count, batch_size)]


def validate(
    model: GuidedAttentionModel,
    samples: Sequence[ExprSample],
    *,
    jobs: int = 1,
) -> float:
    """Greedy-decoding ExpRate on ``samples``."""

    if not samples:
        return 0.0
    preds = model.recognize_batch([s.image for s in samples], jobs=jobs)
    return exprate(preds, [s.tokens for s in samples])


def train(
    model: GuidedAttentionModel,
    cfg: RunConfig,
    train_set: Sequence[ExprSample],
    val_set: Sequence[ExprSample] = (),
    *,
    checkpoint: str | Path | None = None,
    progress: bool | None = None,
    on_epoch: Callable[[EpochStats], None] | None = None,
) -> TrainResult:
    """Train ``model`` in place and keep the best-by-validation checkpoint.

    Without a validation set the epoch with the lowest mean loss is kept.

    Every random choice (shuffling, augmentation, dropout) derives from
    ``cfg.seed``.

    Raises
    ------
    InputError
        If ``train_set`` is empty or has no images.
    NumericError
        If the loss becomes NaN or infinite.
    """

    if not train_set:
        raise InputError("Training set is empty.")
    if any(s.image is None for s in train_set):
        raise InputError("Training samples must carry images.")
    if progress is None:
        progress = sys.stderr.isatty()

    optimizer = SGD(model.parameters(), cfg.optimizer)
    rng = np.random.default_rng([cfg.seed, 1])
    val_set = list(val_set)[: cfg.data.val_limit] if cfg.data.val_limit else list(val_set)
    result = TrainResult()

    for epoch in range(1, cfg.epochs + 1):
        model.train()
        batches = iterate_batches(len(train_set), cfg.data.batch_size, rng)
        losses: List[float] = []
        bar = tqdm(batches, desc=f"epoch {epoch}", unit="batch", disable=not progress, leave=False)
        for batch in bar:
            images = []
            for idx in batch:
                image = train_set[idx].image
                if cfg.data.augment:
                    image = scale_augment(
                        image,
                        [cfg.seed, epoch, int(idx)],
                        low=cfg.data.scale_low,
                        high=cfg.data.scale_high,
                    )
                images.append(image)
            optimizer.zero_grad()
            loss = model.loss(images, [train_set[idx].tokens for idx in batch])
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"Loss became {value} in epoch {epoch}.")
            loss.backward()
            if cfg.optimizer.grad_clip:
                clip_grad_norm(optimizer.params, cfg.optimizer.grad_clip)
            optimizer.step()
            losses.append(value)
            bar.set_postfix(loss=f"{value:.4f}")

        val = validate(model, val_set, jobs=cfg.jobs) if val_set else None
        stats = EpochStats(epoch, float(np.mean(losses)), val)
        result.history.append(stats)
        logger.info(
            "epoch %d: loss %.4f%s",
            epoch,
            stats.loss,
            "" if val is None else f", val ExpRate {val:.2f}",
        )
        score = val if val is not None else -stats.loss
        if score > result.best_score or result.best_epoch is None:
            result.best_score = score
            result.best_epoch = epoch
            if checkpoint is not None:
                save_checkpoint(checkpoint, model, cfg, epoch=epoch, val_exprate=val)
        if on_epoch is not None:
            on_epoch(stats)

    if checkpoint is not None and result.best_epoch is None:
        save_checkpoint(checkpoint, model, cfg, epoch=0, val_exprate=None)
    return result
