"""Greedy, beam and sampling decoders over a frozen model.

Beam search keeps a shrinking beam: a hypothesis that emits ``</s>`` moves
to the completed pool and the live beam narrows by one, so search stops once
K hypotheses are complete (or ``max_len`` is hit). Scores are raw summed
log-probabilities; no length normalisation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .data import BOS, EOS, ParallelCorpus
from .model import DecoderState, ModelParams, decode_step, encode_source, initial_state


@dataclass
class DecodeConfig:
    beam: int = 5
    max_len: Optional[int] = None
    length_cap_ratio: float = 2.0
    length_cap: int = 50

    def __post_init__(self):
        if self.beam < 1:
            raise ValueError("beam must be >= 1")
        if self.max_len is not None and self.max_len < 1:
            raise ValueError("max_len must be >= 1")

    def limit(self, src_len: int) -> int:
        """Maximum number of emitted tokens (``</s>`` included) for a source length."""
        if self.max_len is not None:
            return self.max_len
        return max(1, min(self.length_cap, int(math.ceil(self.length_cap_ratio * src_len))))


@dataclass
class Hypothesis:
    tokens: Tuple[int, ...]
    logprob: float
    alive: bool = False  # True when truncated at max_len without </s>

    @property
    def finished(self) -> bool:
        return bool(self.tokens) and self.tokens[-1] == EOS

    def stripped(self) -> List[int]:
        """Tokens without the trailing ``</s>``."""
        return list(self.tokens[:-1]) if self.finished else list(self.tokens)


@dataclass
class KBestList:
    hypotheses: List[Hypothesis]
    beam: int
    num_completed: int = 0

    def __len__(self) -> int:
        return len(self.hypotheses)

    def __iter__(self):
        return iter(self.hypotheses)

    def __getitem__(self, i) -> Hypothesis:
        return self.hypotheses[i]

    @property
    def best(self) -> Hypothesis:
        return self.hypotheses[0]

    @property
    def best_completed(self) -> Hypothesis:
        """Highest-scoring hypothesis ending in ``</s>``; the best truncation if none finished."""
        return next((h for h in self.hypotheses if h.finished), self.hypotheses[0])


def _rank_key(h: Hypothesis):
    return (-h.logprob, h.tokens)


def greedy_decode(params: ModelParams, src: Sequence[int], cfg: Optional[DecodeConfig] = None) -> Hypothesis:
    cfg = cfg or DecodeConfig(beam=1)
    enc = encode_source(params, src)
    state = initial_state(enc)
    prev, tokens, total = BOS, [], 0.0
    for _ in range(cfg.limit(len(src))):
        log_dist, state = decode_step(params, state, prev, enc)
        tok = int(np.argmax(log_dist))  # first maximum: lowest id wins ties
        total += float(log_dist[tok])
        tokens.append(tok)
        if tok == EOS:
            break
        prev = tok
    return Hypothesis(tuple(tokens), total, alive=tokens[-1] != EOS)


def beam_search(params: ModelParams, src: Sequence[int], cfg: Optional[DecodeConfig] = None) -> KBestList:
    """K-best list of completed hypotheses, padded with the best truncations if fewer than K finish.

    The returned list is ranked by score as a whole, so a padded truncation can
    precede a completed hypothesis with a lower log-probability.
    """
    cfg = cfg or DecodeConfig()
    k = cfg.beam
    enc = encode_source(params, src)
    live: List[Tuple[Tuple[int, ...], float, DecoderState]] = [((), 0.0, initial_state(enc))]
    completed: List[Hypothesis] = []
    for _ in range(cfg.limit(len(src))):
        room = k - len(completed)
        scores, states = [], []
        for tokens, lp, state in live:
            prev = tokens[-1] if tokens else BOS
            log_dist, new_state = decode_step(params, state, prev, enc)
            scores.append(lp + log_dist)
            states.append(new_state)
        flat = np.concatenate(scores)
        vocab = scores[0].shape[0]
        if room < flat.size:
            cut = np.partition(flat, flat.size - room)[flat.size - room]
            cand = np.flatnonzero(flat >= cut)
        else:
            cand = np.arange(flat.size)
        ranked = sorted(cand, key=lambda c: (-flat[c], live[c // vocab][0] + (int(c % vocab),)))[:room]
        nxt = []
        for c in ranked:
            parent, tok = int(c // vocab), int(c % vocab)
            tokens = live[parent][0] + (tok,)
            if tok == EOS:
                completed.append(Hypothesis(tokens, float(flat[c])))
            else:
                nxt.append((tokens, float(flat[c]), states[parent]))
        live = nxt
        if len(completed) >= k or not live:
            break
    n_done = len(completed)
    pool = list(completed)
    if len(pool) < k:
        pool += sorted((Hypothesis(t, lp, alive=True) for t, lp, _ in live), key=_rank_key)[: k - len(pool)]
    # one ranking over finished and truncated entries keeps the list sorted by score
    return KBestList(sorted(pool, key=_rank_key)[:k], k, n_done)


def sample_sequence(params: ModelParams, src: Sequence[int], cfg: Optional[DecodeConfig] = None,
                    seed: int = 0, rng: Optional[np.random.Generator] = None) -> Hypothesis:
    """Ancestral sample; deterministic given ``seed`` (or an explicit generator)."""
    cfg = cfg or DecodeConfig(beam=1)
    rng = rng if rng is not None else np.random.default_rng(seed)
    enc = encode_source(params, src)
    state = initial_state(enc)
    prev, tokens, total = BOS, [], 0.0
    for _ in range(cfg.limit(len(src))):
        log_dist, state = decode_step(params, state, prev, enc)
        cdf = np.cumsum(np.exp(log_dist))
        tok = int(min(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"), len(cdf) - 1))
        total += float(log_dist[tok])
        tokens.append(tok)
        if tok == EOS:
            break
        prev = tok
    return Hypothesis(tuple(tokens), total, alive=tokens[-1] != EOS)


def renormalize_kbest(kbest) -> np.ndarray:
    """Weights proportional to ``exp(logprob)`` over the list, summing to one."""
    hyps = list(kbest)
    if not hyps:
        raise ValueError("cannot renormalise an empty K-best list")
    lp = np.array([h.logprob for h in hyps])
    w = np.exp(lp - lp.max())
    return w / w.sum()


def decode(params: ModelParams, src: Sequence[int], cfg: DecodeConfig) -> Hypothesis:
    """Translation output: greedy for K=1, else the best completed beam hypothesis."""
    if cfg.beam == 1:
        return greedy_decode(params, src, cfg)
    return beam_search(params, src, cfg).best_completed


def translate_corpus(params: ModelParams, sources: Sequence[Sequence[int]], cfg: DecodeConfig) -> List[Hypothesis]:
    return [decode(params, s, cfg) for s in sources]


def mode_mass(params: ModelParams, corpus, cfg: Optional[DecodeConfig] = None) -> float:
    """Mean probability the model assigns to its own greedy output."""
    sources = corpus.src if isinstance(corpus, ParallelCorpus) else list(corpus)
    if not sources:
        raise ValueError("mode mass of an empty corpus")
    cfg = cfg or DecodeConfig(beam=1)
    return float(np.mean([math.exp(greedy_decode(params, s, cfg).logprob) for s in sources]))
