import pytest

from acceptance_log import ACCEPTANCE

from seqdistill.data import ToyTaskConfig, generate_toy_corpus
from seqdistill.model import ModelConfig, init_params
from seqdistill.training import TrainConfig, train

TINY_TOY = ToyTaskConfig(vocab_size=12, min_length=2, max_length=5, synonym_classes=4, num_sentences=2000,
                         dev_size=30, test_size=30)


@pytest.fixture(scope="session")
def toy():
    return generate_toy_corpus(TINY_TOY, 0)


@pytest.fixture(scope="session")
def teacher(toy):
    """A small teacher trained for a few seconds; good enough for non-trivial beams."""
    cfg = ModelConfig(1, 16, len(toy.src_vocab), len(toy.tgt_vocab), dropout_rate=0.0)
    return train(init_params(cfg, 0, 0.5), toy.train, toy.dev,
                 cfg=TrainConfig(epochs=5, batch_size=16, init_range=0.5)).params


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
