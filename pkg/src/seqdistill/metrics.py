"""Smoothed sentence-level BLEU and multi-bleu style corpus BLEU."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Hashable, Sequence, Tuple

MAX_ORDER = 4


@dataclass
class BleuBreakdown:
    precisions: Tuple[float, ...]
    brevity_penalty: float
    hyp_len: int
    ref_len: int
    score: float

    @property
    def ratio(self) -> float:
        return self.hyp_len / self.ref_len if self.ref_len else 0.0


def _ngrams(tokens: Sequence[Hashable], n: int) -> Counter:
    return Counter(tuple(tokens[i: i + n]) for i in range(len(tokens) - n + 1))


def _match_counts(hyp: Sequence[Hashable], ref: Sequence[Hashable], n: int) -> Tuple[int, int]:
    h, r = _ngrams(hyp, n), _ngrams(ref, n)
    return sum(min(c, r[g]) for g, c in h.items()), max(len(hyp) - n + 1, 0)


def _brevity(hyp_len: int, ref_len: int) -> float:
    if hyp_len == 0:
        return 0.0
    return min(1.0, math.exp(1.0 - ref_len / hyp_len))


def smoothed_sentence_bleu(hyp: Sequence[Hashable], ref: Sequence[Hashable]) -> BleuBreakdown:
    """BLEU-4 in [0, 1] with add-one smoothing on orders 2..4 (unigram precision unsmoothed)."""
    if len(ref) == 0:
        raise ValueError("reference must be non-empty")
    if len(hyp) == 0:
        return BleuBreakdown((0.0,) * MAX_ORDER, 0.0, 0, len(ref), 0.0)
    precisions = []
    for n in range(1, MAX_ORDER + 1):
        m, total = _match_counts(hyp, ref, n)
        precisions.append(m / total if n == 1 else (m + 1) / (total + 1))
    bp = _brevity(len(hyp), len(ref))
    if precisions[0] == 0.0:
        score = 0.0
    else:
        score = bp * math.exp(sum(math.log(p) for p in precisions) / MAX_ORDER)
    return BleuBreakdown(tuple(precisions), bp, len(hyp), len(ref), score)


def sentence_bleu(hyp: Sequence[Hashable], ref: Sequence[Hashable]) -> float:
    return smoothed_sentence_bleu(hyp, ref).score


def corpus_bleu(hyps: Sequence[Sequence[Hashable]], refs: Sequence[Sequence[Hashable]]) -> BleuBreakdown:
    """Pooled-count BLEU-4, unsmoothed; ``score`` is reported on the 0-100 scale."""
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses but {len(refs)} references")
    if any(len(r) == 0 for r in refs):
        raise ValueError("references must be non-empty")
    matches = [0] * MAX_ORDER
    totals = [0] * MAX_ORDER
    for h, r in zip(hyps, refs):
        for n in range(1, MAX_ORDER + 1):
            m, t = _match_counts(h, r, n)
            matches[n - 1] += m
            totals[n - 1] += t
    hyp_len = sum(len(h) for h in hyps)
    ref_len = sum(len(r) for r in refs)
    precisions = tuple(m / t if t else 0.0 for m, t in zip(matches, totals))
    bp = _brevity(hyp_len, ref_len)
    if min(precisions) == 0.0:
        score = 0.0
    else:
        score = 100.0 * bp * math.exp(sum(math.log(p) for p in precisions) / MAX_ORDER)
    return BleuBreakdown(precisions, bp, hyp_len, ref_len, score)


def format_corpus_bleu(b: BleuBreakdown) -> str:
    p = "/".join(f"{100 * x:.1f}" for x in b.precisions)
    return (f"BLEU = {b.score:.2f}, {p} (BP={b.brevity_penalty:.3f}, ratio={b.ratio:.3f}, "
            f"hyp_len={b.hyp_len}, ref_len={b.ref_len})")
