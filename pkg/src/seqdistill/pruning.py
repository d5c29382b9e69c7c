"""Class-blind magnitude pruning, masked retraining and compression accounting."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from .data import ParallelCorpus, ceil_fraction
from .model import ModelParams, word_nll_loss
from .training import LossFn, TrainResult, fine_tune


@dataclass
class PruneMask:
    masks: Dict[str, np.ndarray]   # True = retained
    pruned_fraction: float
    threshold: float

    @property
    def total(self) -> int:
        return sum(m.size for m in self.masks.values())

    @property
    def retained(self) -> int:
        return int(sum(m.sum() for m in self.masks.values()))


def compute_prune_mask(params: ModelParams, fraction: float) -> PruneMask:
    """Mask out the ``ceil(fraction * N)`` entries of smallest magnitude over all tensors.

    Equal magnitudes are ordered by (tensor name, flat index), earlier
    entries pruned first.
    """
    if not 0.0 <= fraction < 1.0:
        raise ValueError("fraction must lie in [0, 1)")
    names = sorted(params)
    flat = np.concatenate([np.abs(params[n].values).reshape(-1) for n in names])
    n_prune = ceil_fraction(fraction, flat.size)
    keep = np.ones(flat.size, dtype=bool)
    threshold = 0.0
    if n_prune:
        order = np.argsort(flat, kind="stable")
        keep[order[:n_prune]] = False
        threshold = float(flat[order[n_prune - 1]])
    masks, offset = {}, 0
    for n in names:
        size = params[n].size
        masks[n] = keep[offset: offset + size].reshape(params[n].shape)
        offset += size
    return PruneMask({n: masks[n] for n in params}, fraction, threshold)


def apply_mask(params: ModelParams, mask: PruneMask, in_place: bool = False) -> ModelParams:
    """Zero every masked entry. Returns ``params`` itself when ``in_place``."""
    out = params if in_place else params.copy()
    for name, t in out.items():
        m = mask.masks.get(name)
        if m is None or m.shape != t.shape:
            raise ValueError(f"mask shape mismatch for {name}")
        t.values = np.where(m, t.values, 0.0)
    return out


def retrain_pruned(params: ModelParams, mask: PruneMask,
                   seq_kd: Tuple[ParallelCorpus, ParallelCorpus],
                   seq_inter: Tuple[ParallelCorpus, ParallelCorpus],
                   lrs: Tuple[float, float] = (0.2, 0.1), loss_fn: LossFn = word_nll_loss,
                   max_epochs: Tuple[int, int] = (10, 10), batch_size: int = 64, seed: int = 0) -> TrainResult:
    """Retrain on Seq-KD data, then fine-tune toward Seq-Inter data, re-masking after every update.

    ``seq_kd`` and ``seq_inter`` are ``(train, dev)`` pairs. The result holds
    the best-dev checkpoint of the second phase.
    """
    start = apply_mask(params, mask)

    def remask(p: ModelParams) -> None:
        apply_mask(p, mask, in_place=True)

    phase1 = fine_tune(start, seq_kd[0], seq_kd[1], loss_fn, lr=lrs[0], max_epochs=max_epochs[0],
                       batch_size=batch_size, seed=seed, after_update=remask)
    phase2 = fine_tune(phase1.params, seq_inter[0], seq_inter[1], loss_fn, lr=lrs[1], max_epochs=max_epochs[1],
                       batch_size=batch_size, seed=seed + 1, after_update=remask)
    phase2.history = phase1.history + phase2.history
    return phase2


@dataclass
class CompressionReport:
    total: int
    retained: int
    teacher: int

    @property
    def ratio(self) -> int:
        return int(round(self.teacher / self.retained))

    @property
    def ratio_text(self) -> str:
        return f"{self.ratio}×"

    @property
    def params_text(self) -> str:
        if self.retained >= 1_000_000:
            return f"{round(self.retained / 1_000_000)} m"
        return str(self.retained)

    def row(self, label: str, prune_pct: float, bleu: Optional[float] = None) -> str:
        b = "-" if bleu is None else f"{bleu:.2f}"
        return f"{label}\t{prune_pct:.0f}%\t{self.params_text}\t{b}\t{self.ratio_text}"


def compression_report(total: int, retained: int, teacher_count: int) -> CompressionReport:
    if total <= 0 or retained <= 0 or teacher_count <= 0:
        raise ValueError("parameter counts must be positive")
    return CompressionReport(total, retained, teacher_count)


def retained_after(total: int, fraction: float) -> int:
    return total - ceil_fraction(fraction, total)
