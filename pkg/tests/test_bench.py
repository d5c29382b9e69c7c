import pytest

from seqdistill.bench import throughput_benchmark
from seqdistill.data import ParallelCorpus


class TestThroughput:
    def test_words_over_wall(self, teacher, toy):
        corpus = toy.dev.head(10)
        r = throughput_benchmark(teacher, corpus, beam=1, repetitions=2)
        assert r.total_source_words == 2 * corpus.num_source_words()
        assert r.words_per_second == pytest.approx(r.total_source_words / r.wall_seconds)
        assert r.sentences == 20 and r.device == "cpu" and r.warmup_excluded

    def test_word_count_independent_of_beam(self, teacher, toy):
        corpus = toy.dev.head(5)
        a = throughput_benchmark(teacher, corpus, beam=1, warmup=False)
        b = throughput_benchmark(teacher, corpus, beam=4, warmup=False)
        assert a.total_source_words == b.total_source_words

    def test_wider_beam_is_slower(self, teacher, toy):
        corpus = toy.dev
        k1 = throughput_benchmark(teacher, corpus, beam=1)
        k8 = throughput_benchmark(teacher, corpus, beam=8)
        assert k8.seconds_per_sentence > k1.seconds_per_sentence

    def test_empty_corpus(self, teacher):
        with pytest.raises(ValueError):
            throughput_benchmark(teacher, ParallelCorpus([], []), beam=1)

    def test_repetitions(self, teacher, toy):
        with pytest.raises(ValueError):
            throughput_benchmark(teacher, toy.dev.head(2), beam=1, repetitions=0)
