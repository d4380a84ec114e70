import numpy as np
import pytest

from monoattn.model import ModelConfig, Seq2SeqModel


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(**overrides) -> ModelConfig:
    base = dict(src_vocab_size=10, tgt_vocab_size=9, src_embed_dim=4, tgt_embed_dim=4, enc_hidden=3,
                dec_hidden=5, scorer_hidden=4, position_hidden=4, seed=0)
    base.update(overrides)
    return ModelConfig(**base)


def tiny_model(**overrides) -> Seq2SeqModel:
    return Seq2SeqModel(tiny_config(**overrides))


# filled by tests/test_acceptance.py, one line per criterion
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
