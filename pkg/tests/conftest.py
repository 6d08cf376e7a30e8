"""Shared fixtures: a small synthetic corpus, its vocabulary, and a
surrogate trained just long enough to give trigger search a usable
gradient.  Session-scoped because training even the tiny model is the
slowest thing the unit tests do."""

import pytest

from stabforge.corpus import (build_vocab, encode_corpus,
                              generate_synthetic_corpus)
from stabforge.lexer import deadcode_token_universe
from stabforge.model import ModelConfig, Transformer
from stabforge.training import TrainConfig, train

ATTACK_TARGET = "load_data"


@pytest.fixture(scope="session")
def tiny_corpus():
    return generate_synthetic_corpus("A", 60, seed=3, task="mnp")


@pytest.fixture(scope="session")
def tiny_vocab(tiny_corpus):
    extra = [ATTACK_TARGET, " ".join(deadcode_token_universe())]
    return build_vocab(tiny_corpus, extra_texts=extra)


@pytest.fixture(scope="session")
def tiny_model_config(tiny_vocab):
    return ModelConfig(vocab_size=len(tiny_vocab), d_model=16, n_heads=2,
                       ffn_dim=32, n_enc_layers=1, n_dec_layers=1,
                       max_src_len=48, max_tgt_len=8)


@pytest.fixture(scope="session")
def tiny_surrogate(tiny_corpus, tiny_vocab, tiny_model_config):
    encoded = encode_corpus(tiny_corpus, tiny_vocab)
    model = Transformer(tiny_model_config, seed=1)
    cfg = TrainConfig(mode="vanilla", lr=2e-3, epochs=6, batch_size=16,
                      patience=6, seed=1)
    train(model, encoded[:48], encoded[48:], cfg)
    return model


@pytest.fixture
def announce(capsys):
    """Print a line that survives pytest's capture, for per-criterion
    verdicts."""

    def _announce(line):
        with capsys.disabled():
            print(line, flush=True)

    return _announce
