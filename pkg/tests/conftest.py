import os

import numpy as np
import pytest

from minimoe.config import ModelConfig
from minimoe.corpus import build_vocab, encode_windows
from minimoe.model import EncoderModel
from minimoe.rng import SEED_ENV_VAR, stream

SENTENCES = [
    "the small model learns from the large model",
    "experts share the work of the feed forward block",
    "a router sends every token to one expert",
    "relations between tokens carry the attention knowledge",
    "the teacher is frozen while the student trains",
    "balanced routing keeps every expert busy",
    "the corpus has one document on every line",
    "distillation aligns the student with the teacher",
]


def pytest_collection_modifyitems(config, items):
    if os.getenv("MINIMOE_RUN_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="set MINIMOE_RUN_SLOW=1 to run desk-scale pipelines")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(autouse=True)
def no_seed_override(monkeypatch):
    monkeypatch.delenv(SEED_ENV_VAR, raising=False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return ModelConfig(num_layers=1, hidden=8, num_heads=2, ffn_dim=16, vocab_size=64, max_seq_len=16,
                       relation_heads=2, dropout=0.0)


@pytest.fixture
def tiny_teacher_config():
    return ModelConfig(num_layers=2, hidden=16, num_heads=4, ffn_dim=32, vocab_size=64, max_seq_len=16,
                       relation_heads=2, dropout=0.0)


@pytest.fixture
def tiny_moe_config(tiny_config):
    return tiny_config.with_experts(4)


@pytest.fixture
def tiny_model(tiny_config):
    return EncoderModel.initialize(tiny_config, rng=stream(0, "test-model"))


@pytest.fixture
def corpus_lines():
    return SENTENCES * 4


@pytest.fixture
def corpus_file(tmp_path, corpus_lines):
    path = tmp_path / "corpus.txt"
    path.write_text("\n".join(corpus_lines) + "\n", encoding="utf-8")
    return path


@pytest.fixture
def vocab(corpus_lines):
    return build_vocab(corpus_lines, 64)


@pytest.fixture
def windows(corpus_lines, vocab):
    return encode_windows(corpus_lines, vocab, 8)
