"""Vocabularies, parallel corpora, batching and the synthetic translation task."""

from __future__ import annotations

import hashlib
import math
import os
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Sequence

import numpy as np

PAD, UNK, BOS, EOS = 0, 1, 2, 3
SPECIALS = ("<pad>", "<unk>", "<s>", "</s>")


class CorpusError(ValueError):
    """Malformed corpus or vocabulary input."""


class Vocabulary:
    """Bidirectional token/id table. Ids 0..3 are always the four specials."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:4]) != SPECIALS:
            tokens = list(SPECIALS) + [t for t in tokens if t not in SPECIALS]
        if len(set(tokens)) != len(tokens):
            raise CorpusError("vocabulary tokens must be distinct")
        self.tokens = tokens
        self.index = {tok: i for i, tok in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def __contains__(self, tok: str) -> bool:
        return tok in self.index

    def encode(self, tokens: Sequence[str]) -> List[int]:
        return [self.index.get(t, UNK) for t in tokens]

    def decode(self, ids: Sequence[int]) -> List[str]:
        return [self.tokens[i] for i in ids]

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for tok in self.tokens:
                f.write(tok + "\n")

    @classmethod
    def load(cls, path: str) -> "Vocabulary":
        with open(path, encoding="utf-8") as f:
            tokens = [line.rstrip("\n") for line in f]
        if tuple(tokens[:4]) != SPECIALS:
            raise CorpusError(f"{path}: first four lines must be {SPECIALS}")
        return cls(tokens)

    def checksum(self) -> str:
        return hashlib.sha256("".join(t + "\n" for t in self.tokens).encode("utf-8")).hexdigest()


def build_vocab(sentences: Sequence[Sequence[str]], max_size: int) -> Vocabulary:
    """Keep the ``max_size - 4`` most frequent tokens (ties broken lexicographically)."""
    if max_size < 4:
        raise ValueError("max_size must leave room for the four special tokens")
    counts = Counter(tok for sent in sentences for tok in sent)
    if not counts:
        raise CorpusError("cannot build a vocabulary from an empty corpus")
    for s in SPECIALS:
        counts.pop(s, None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocabulary(list(SPECIALS) + [tok for tok, _ in ranked[: max_size - 4]])


@dataclass
class ParallelCorpus:
    """Aligned (source ids, target ids) pairs. Targets carry no ``<s>``/``</s>``.

    ``weights`` optionally scales each pair's contribution to the loss
    (used by the K-best training variant); ``None`` means all ones.
    """

    src: List[List[int]]
    tgt: List[List[int]]
    weights: Optional[List[float]] = None

    def __post_init__(self):
        if len(self.src) != len(self.tgt):
            raise CorpusError(f"source/target size mismatch: {len(self.src)} vs {len(self.tgt)}")
        for i, (s, t) in enumerate(zip(self.src, self.tgt)):
            if not s or not t:
                raise CorpusError(f"pair {i} has an empty side")
        if self.weights is not None and len(self.weights) != len(self.src):
            raise CorpusError("weights must align with pairs")

    def __len__(self) -> int:
        return len(self.src)

    @property
    def pairs(self):
        return list(zip(self.src, self.tgt))

    def subset(self, indices: Sequence[int]) -> "ParallelCorpus":
        w = None if self.weights is None else [self.weights[i] for i in indices]
        return ParallelCorpus([self.src[i] for i in indices], [self.tgt[i] for i in indices], w)

    def head(self, n: int) -> "ParallelCorpus":
        return self.subset(range(min(n, len(self))))

    def num_source_words(self) -> int:
        return sum(len(s) for s in self.src)

    def validate(self, src_vocab_size: int, tgt_vocab_size: int) -> None:
        for i, (s, t) in enumerate(zip(self.src, self.tgt)):
            if max(s) >= src_vocab_size or max(t) >= tgt_vocab_size or min(s) < 0 or min(t) < 0:
                raise CorpusError(f"pair {i} has an id outside the vocabulary")


# ------------------------------------------------------------------ file I/O


def read_sentences(path: str) -> List[List[str]]:
    """One sentence per line, tokens separated by single spaces. Blank lines are errors."""
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                raise CorpusError(f"{path}:{lineno}: empty line")
            out.append(line.strip().split(" "))
    return out


def write_sentences(path: str, sentences: Sequence[Sequence[str]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for sent in sentences:
            f.write(" ".join(sent) + "\n")


def read_corpus(prefix: str, src_vocab: Vocabulary, tgt_vocab: Vocabulary) -> ParallelCorpus:
    """Read ``prefix.src`` / ``prefix.tgt`` into id sequences."""
    src = read_sentences(prefix + ".src")
    tgt = read_sentences(prefix + ".tgt")
    if len(src) != len(tgt):
        raise CorpusError(f"{prefix}: {len(src)} source lines but {len(tgt)} target lines")
    return ParallelCorpus([src_vocab.encode(s) for s in src], [tgt_vocab.encode(t) for t in tgt])


def write_corpus(prefix: str, corpus: ParallelCorpus, src_vocab: Vocabulary, tgt_vocab: Vocabulary) -> None:
    directory = os.path.dirname(prefix)
    if directory:
        os.makedirs(directory, exist_ok=True)
    write_sentences(prefix + ".src", [src_vocab.decode(s) for s in corpus.src])
    write_sentences(prefix + ".tgt", [tgt_vocab.decode(t) for t in corpus.tgt])


# ------------------------------------------------------------------ batching


@dataclass
class Batch:
    """Padded id matrices for one minibatch.

    ``tgt_in`` starts with ``<s>``; ``tgt_out`` ends with ``</s>``; both are
    right-padded with ``<pad>`` and ``tgt_mask`` marks real output positions.
    """

    src: np.ndarray
    src_lengths: np.ndarray
    tgt_in: np.ndarray
    tgt_out: np.ndarray
    tgt_mask: np.ndarray
    indices: np.ndarray
    weights: np.ndarray

    def __len__(self) -> int:
        return self.src.shape[0]

    @property
    def num_tokens(self) -> int:
        return int(self.tgt_mask.sum())


def make_batch(src: Sequence[Sequence[int]], tgt: Sequence[Sequence[int]],
               indices: Optional[Sequence[int]] = None,
               weights: Optional[Sequence[float]] = None) -> Batch:
    b = len(src)
    src_lengths = np.array([len(s) for s in src], dtype=np.int64)
    tgt_lengths = np.array([len(t) + 1 for t in tgt], dtype=np.int64)
    src_mat = np.full((b, src_lengths.max()), PAD, dtype=np.int64)
    tgt_in = np.full((b, tgt_lengths.max()), PAD, dtype=np.int64)
    tgt_out = np.full((b, tgt_lengths.max()), PAD, dtype=np.int64)
    for i, (s, t) in enumerate(zip(src, tgt)):
        src_mat[i, : len(s)] = s
        tgt_in[i, 0] = BOS
        tgt_in[i, 1: len(t) + 1] = t
        tgt_out[i, : len(t)] = t
        tgt_out[i, len(t)] = EOS
    mask = np.arange(tgt_lengths.max())[None, :] < tgt_lengths[:, None]
    if indices is None:
        indices = np.arange(b)
    w = np.ones(b) if weights is None else np.asarray(weights, dtype=np.float64)
    return Batch(src_mat, src_lengths, tgt_in, tgt_out, mask.astype(np.float64),
                 np.asarray(indices, dtype=np.int64), w)


def batch_iterator(corpus: ParallelCorpus, batch_size: int, sort_by_length: bool = False,
                   shuffle_seed: Optional[int] = None) -> Iterator[Batch]:
    """Yield padded batches covering every pair exactly once.

    With ``shuffle_seed`` the pair order is permuted (and, when sorting,
    batch order is permuted too); without it the corpus order is kept and the
    short remainder batch comes last.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(corpus)
    rng = np.random.default_rng(shuffle_seed) if shuffle_seed is not None else None
    order = rng.permutation(n) if rng is not None else np.arange(n)
    if sort_by_length:
        # sort inside windows of 20 batches so padding stays small but order still mixes
        window = batch_size * 20
        chunks = []
        for start in range(0, n, window):
            part = order[start: start + window]
            keys = [(len(corpus.src[i]), len(corpus.tgt[i])) for i in part]
            chunks.append(part[sorted(range(len(part)), key=lambda j: keys[j])])
        order = np.concatenate(chunks) if chunks else order
    groups = [order[i: i + batch_size] for i in range(0, n, batch_size)]
    if sort_by_length and rng is not None:
        groups = [groups[i] for i in rng.permutation(len(groups))]
    for idx in groups:
        w = None if corpus.weights is None else [corpus.weights[i] for i in idx]
        yield make_batch([corpus.src[i] for i in idx], [corpus.tgt[i] for i in idx], idx, w)


# ------------------------------------------------------------ synthetic task


@dataclass
class ToyTaskConfig:
    """Lexicon relabelling + chunk reversal + synonym noise translation task."""

    vocab_size: int = 120
    min_length: int = 5
    max_length: int = 15
    lexicon_seed: int = 1234
    chunk_size: int = 3
    synonym_noise_rate: float = 0.1
    synonym_classes: int = 40
    num_sentences: int = 10000
    dev_size: int = 500
    test_size: int = 500

    def __post_init__(self):
        if not 0.0 <= self.synonym_noise_rate <= 0.5:
            raise ValueError("synonym_noise_rate must lie in [0, 0.5]")
        if self.chunk_size < 1:
            raise ValueError("chunk_size must be >= 1")
        if not 1 <= self.min_length <= self.max_length:
            raise ValueError("need 1 <= min_length <= max_length")
        if self.synonym_classes < 1:
            raise ValueError("synonym_classes must be >= 1")


@dataclass
class ToyLexicon:
    """The hidden structure of a toy task (source word -> target word, synonym classes)."""

    mapping: np.ndarray
    classes: List[List[int]]
    class_of: np.ndarray
    src_words: List[str] = field(default_factory=list)
    tgt_words: List[str] = field(default_factory=list)


def make_lexicon(cfg: ToyTaskConfig) -> ToyLexicon:
    if cfg.vocab_size < cfg.synonym_classes:
        raise ValueError(f"vocab_size {cfg.vocab_size} < synonym_classes {cfg.synonym_classes}")
    rng = np.random.default_rng(cfg.lexicon_seed)
    mapping = rng.permutation(cfg.vocab_size)
    members = rng.permutation(cfg.vocab_size)
    classes = [sorted(int(m) for m in part) for part in np.array_split(members, cfg.synonym_classes)]
    class_of = np.empty(cfg.vocab_size, dtype=np.int64)
    for c, part in enumerate(classes):
        class_of[part] = c
    width = len(str(cfg.vocab_size - 1))
    return ToyLexicon(mapping, classes, class_of,
                      [f"s{i:0{width}d}" for i in range(cfg.vocab_size)],
                      [f"t{i:0{width}d}" for i in range(cfg.vocab_size)])


def translate_clean(lex: ToyLexicon, src: Sequence[int], chunk_size: int) -> List[int]:
    """Noise-free target word indices for source word indices."""
    mapped = [int(lex.mapping[w]) for w in src]
    out = []
    for start in range(0, len(mapped), chunk_size):
        out.extend(reversed(mapped[start: start + chunk_size]))
    return out


@dataclass
class ToyCorpus:
    train: ParallelCorpus
    dev: ParallelCorpus
    test: ParallelCorpus
    src_vocab: Vocabulary
    tgt_vocab: Vocabulary
    lexicon: ToyLexicon
    noised_tokens: int = 0
    total_tokens: int = 0


def generate_toy_corpus(cfg: ToyTaskConfig, seed: int) -> ToyCorpus:
    """Generate disjoint train/dev/test splits, deterministic in ``(cfg, seed)``."""
    lex = make_lexicon(cfg)
    rng = np.random.default_rng(seed)
    total = cfg.num_sentences + cfg.dev_size + cfg.test_size
    seen = set()
    sources = []
    attempts = 0
    while len(sources) < total:
        attempts += 1
        if attempts > 50 * total:
            raise ValueError("toy task space too small for the requested number of distinct sentences")
        n = int(rng.integers(cfg.min_length, cfg.max_length + 1))
        sent = tuple(int(w) for w in rng.integers(0, cfg.vocab_size, size=n))
        if sent in seen:
            continue
        seen.add(sent)
        sources.append(sent)

    noised = 0
    n_tok = 0
    targets = []
    for sent in sources:
        tgt = translate_clean(lex, sent, cfg.chunk_size)
        flips = rng.random(len(tgt)) < cfg.synonym_noise_rate
        picks = rng.random(len(tgt))
        for j in np.flatnonzero(flips):
            others = [w for w in lex.classes[lex.class_of[tgt[j]]] if w != tgt[j]]
            if others:
                tgt[j] = others[int(picks[j] * len(others))]
                noised += 1
        n_tok += len(tgt)
        targets.append(tgt)

    # word index w -> vocabulary id w + 4 (all words present, no frequency pruning needed)
    src_vocab = Vocabulary(list(SPECIALS) + lex.src_words)
    tgt_vocab = Vocabulary(list(SPECIALS) + lex.tgt_words)

    def split(lo, hi):
        return ParallelCorpus([[w + 4 for w in s] for s in sources[lo:hi]],
                              [[w + 4 for w in t] for t in targets[lo:hi]])

    a, b = cfg.num_sentences, cfg.num_sentences + cfg.dev_size
    return ToyCorpus(split(0, a), split(a, b), split(b, total), src_vocab, tgt_vocab, lex, noised, n_tok)


def save_toy_corpus(toy: ToyCorpus, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    toy.src_vocab.save(os.path.join(out_dir, "vocab.src"))
    toy.tgt_vocab.save(os.path.join(out_dir, "vocab.tgt"))
    for name in ("train", "dev", "test"):
        write_corpus(os.path.join(out_dir, name), getattr(toy, name), toy.src_vocab, toy.tgt_vocab)


def ceil_fraction(fraction: float, n: int) -> int:
    """``ceil(fraction * n)`` without float round-up artefacts such as 0.7*10 -> 8."""
    return int(math.ceil(round(fraction * n, 9)))
