"""Decode throughput in source words per second (host CPU, batch size 1)."""

from __future__ import annotations

import time
from dataclasses import dataclass

from .data import ParallelCorpus
from .decoder import DecodeConfig, decode
from .model import ModelParams


@dataclass
class BenchResult:
    words_per_second: float
    beam: int
    total_source_words: int
    wall_seconds: float
    warmup_excluded: bool = True
    device: str = "cpu"
    sentences: int = 0

    @property
    def seconds_per_sentence(self) -> float:
        return self.wall_seconds / self.sentences if self.sentences else 0.0


def throughput_benchmark(params: ModelParams, corpus: ParallelCorpus, beam: int, repetitions: int = 1,
                         warmup: bool = True) -> BenchResult:
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    if len(corpus) == 0:
        raise ValueError("cannot benchmark on an empty corpus")
    cfg = DecodeConfig(beam=beam)
    sources = corpus.src
    if warmup:
        for s in sources:
            decode(params, s, cfg)
    start = time.perf_counter()
    for _ in range(repetitions):
        for s in sources:
            decode(params, s, cfg)
    wall = time.perf_counter() - start
    words = corpus.num_source_words() * repetitions
    return BenchResult(words / wall, beam, words, wall, warmup, "cpu", len(sources) * repetitions)
