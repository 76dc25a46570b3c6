import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))  # make oracles importable

from lenreg import corpus
from lenreg.encoder import ModelConfig, init_params

DATA_DIR = Path(__file__).resolve().parent.parent / "data"


def rng_of(*entropy) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=entropy))


@pytest.fixture(scope="session")
def markov_units():
    return corpus.ingest((DATA_DIR / "markov_train.txt").read_bytes())


@pytest.fixture(scope="session")
def markov_vocab(markov_units):
    return corpus.build_vocab(markov_units, 8192)


@pytest.fixture(scope="session")
def markov_sequences(markov_units, markov_vocab):
    return [corpus.encode(u, markov_vocab, 128) for u in markov_units]


@pytest.fixture(scope="session")
def skew_sequences():
    units = corpus.ingest((DATA_DIR / "length_skew.txt").read_bytes())
    vocab = corpus.build_vocab(units, 512)
    return [corpus.encode(u, vocab, 128) for u in units]


@pytest.fixture(scope="session")
def micro_config():
    return ModelConfig(hidden_size=8, num_layers=1, num_heads=2, ffn_size=16,
                       maxlen=8, vocab_size=12, dropout_p=0.0, seed=3)


@pytest.fixture(scope="session")
def micro_params(micro_config):
    return init_params(micro_config)


def make_batch(config: ModelConfig, lengths, rng, with_head=False):
    """Valid padded batch: [CLS] body [SEP] then pad, ids above reserved."""
    s = max(lengths)
    ids = np.zeros((len(lengths), s), dtype=np.int64)
    pad = np.ones((len(lengths), s), dtype=bool)
    head = np.zeros((len(lengths), s), dtype=bool)
    for b, ln in enumerate(lengths):
        assert 3 <= ln <= config.maxlen
        ids[b, 0] = corpus.CLS_ID
        ids[b, ln - 1] = corpus.SEP_ID
        ids[b, 1:ln - 1] = rng.integers(5, config.vocab_size, size=ln - 2)
        pad[b, :ln] = False
        head[b, int(rng.integers(1, ln - 1))] = True
    if with_head:
        return ids, pad, head
    return ids, pad
