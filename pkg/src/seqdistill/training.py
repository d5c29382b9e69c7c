"""Plain SGD training with clipping, learning-rate decay and best-dev checkpointing."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from . import autodiff as ad
from .data import Batch, ParallelCorpus, batch_iterator
from .model import LossResult, ModelParams, perplexity, word_nll_loss

log = logging.getLogger(__name__)

LossFn = Callable[[ModelParams, Batch, Optional[np.random.Generator]], LossResult]
UpdateHook = Callable[[ModelParams], None]


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 13
    batch_size: int = 64
    learning_rate: float = 1.0
    lr_decay: float = 0.5
    decay_trigger: str = "dev-ppl-worse"  # or "fixed-epoch"
    decay_start: int = 8
    grad_clip_norm: float = 5.0
    init_range: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")
        if self.decay_trigger not in ("dev-ppl-worse", "fixed-epoch"):
            raise ValueError(f"unknown decay_trigger {self.decay_trigger!r}")


@dataclass
class EpochLog:
    epoch: int
    learning_rate: float
    train_loss: float   # per target token
    dev_ppl: float
    seconds: float


@dataclass
class TrainResult:
    params: ModelParams
    history: List[EpochLog] = field(default_factory=list)
    best_epoch: int = 0
    best_dev_ppl: float = float("inf")
    initial_dev_ppl: float = float("inf")


def sgd_epoch(params: ModelParams, corpus: ParallelCorpus, loss_fn: LossFn, lr: float, clip: float,
              batch_size: int, seed: int, epoch: int, after_update: Optional[UpdateHook] = None) -> float:
    """One pass of clipped SGD; returns mean training loss per target token."""
    leaves = list(params.tensors.values())
    rng = np.random.default_rng([seed, epoch, 1])
    total, tokens = 0.0, 0
    for bi, batch in enumerate(batch_iterator(corpus, batch_size, sort_by_length=True, shuffle_seed=seed * 1000 + epoch)):
        with ad.Tape() as tape:
            res = loss_fn(params, batch, rng)
            objective = res.per_sentence_mean
        value = objective.item()
        if not np.isfinite(value):
            raise TrainingError(f"non-finite loss at epoch {epoch}, batch {bi}")
        total += res.total.item()
        tokens += res.num_tokens
        if lr == 0.0:
            continue
        ad.backward(tape, objective, leaves)
        norm = np.sqrt(sum(float(np.sum(t.grad * t.grad)) for t in leaves))
        step = lr * (clip / norm if clip > 0 and norm > clip else 1.0)
        for t in leaves:
            t.values = t.values - step * t.grad
            t.grad = None
        if after_update is not None:
            after_update(params)
    return total / max(tokens, 1)


def train(params: ModelParams, train_corpus: ParallelCorpus, dev_corpus: ParallelCorpus,
          loss_fn: LossFn = word_nll_loss, cfg: Optional[TrainConfig] = None,
          after_update: Optional[UpdateHook] = None) -> TrainResult:
    """Train in place on a copy of ``params`` and return the best-dev-perplexity checkpoint."""
    cfg = cfg or TrainConfig()
    work = params.copy(requires_grad=True)
    dev_ppl = perplexity(work, dev_corpus)
    result = TrainResult(work.copy(), initial_dev_ppl=dev_ppl, best_dev_ppl=dev_ppl)
    lr = cfg.learning_rate
    prev = dev_ppl
    for epoch in range(1, cfg.epochs + 1):
        start = time.perf_counter()
        loss = sgd_epoch(work, train_corpus, loss_fn, lr, cfg.grad_clip_norm, cfg.batch_size, cfg.seed, epoch,
                         after_update)
        dev_ppl = perplexity(work, dev_corpus)
        if not np.isfinite(dev_ppl):
            raise TrainingError(f"non-finite dev perplexity after epoch {epoch}")
        result.history.append(EpochLog(epoch, lr, loss, dev_ppl, time.perf_counter() - start))
        log.info("epoch %d lr %.4g train loss %.4f dev ppl %.4f", epoch, lr, loss, dev_ppl)
        if dev_ppl < result.best_dev_ppl:
            result.best_dev_ppl, result.best_epoch = dev_ppl, epoch
            result.params = work.copy()
        if cfg.decay_trigger == "dev-ppl-worse":
            if dev_ppl >= prev:
                lr *= cfg.lr_decay
        elif epoch >= cfg.decay_start:
            lr *= cfg.lr_decay
        prev = dev_ppl
    return result


def fine_tune(params: ModelParams, train_corpus: ParallelCorpus, dev_corpus: ParallelCorpus,
              loss_fn: LossFn = word_nll_loss, lr: float = 0.1, max_epochs: int = 5, patience: int = 2,
              batch_size: int = 64, grad_clip_norm: float = 5.0, seed: int = 0,
              after_update: Optional[UpdateHook] = None) -> TrainResult:
    """Continue SGD at a fixed rate until dev perplexity stalls for ``patience`` epochs."""
    work = params.copy(requires_grad=True)
    dev_ppl = perplexity(work, dev_corpus)
    result = TrainResult(work.copy(), initial_dev_ppl=dev_ppl, best_dev_ppl=dev_ppl)
    stalled = 0
    for epoch in range(1, max_epochs + 1):
        start = time.perf_counter()
        loss = sgd_epoch(work, train_corpus, loss_fn, lr, grad_clip_norm, batch_size, seed, epoch, after_update)
        dev_ppl = perplexity(work, dev_corpus)
        if not np.isfinite(dev_ppl):
            raise TrainingError(f"non-finite dev perplexity after fine-tune epoch {epoch}")
        result.history.append(EpochLog(epoch, lr, loss, dev_ppl, time.perf_counter() - start))
        log.info("fine-tune epoch %d lr %.4g train loss %.4f dev ppl %.4f", epoch, lr, loss, dev_ppl)
        if dev_ppl < result.best_dev_ppl:
            result.best_dev_ppl, result.best_epoch = dev_ppl, epoch
            result.params = work.copy()
            stalled = 0
        else:
            stalled += 1
            if stalled >= patience:
                break
    return result
