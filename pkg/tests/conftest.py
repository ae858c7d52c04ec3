import numpy as np
import pytest

from convtex.data import build_corpus, load_corpus
from convtex.model import Model, desk_config


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    build_corpus(40, seed=7, out_dir=out)
    return out


@pytest.fixture(scope="session")
def train_set(corpus_dir):
    return load_corpus(corpus_dir / "train.tsv", corpus_dir / "vocab.txt")


@pytest.fixture(scope="session")
def val_set(corpus_dir):
    return load_corpus(corpus_dir / "val.tsv", corpus_dir / "vocab.txt")


def tiny_model(vocab_size, d_model=32, depth=2, seed=0):
    return Model(desk_config(vocab_size=vocab_size, d_model=d_model, depth=depth), seed=seed)


@pytest.fixture
def model(train_set):
    return tiny_model(len(train_set.vocab))
