import numpy as np
import pytest

from glstm.captioner import init_model
from glstm.textcorpus import Corpus, CorpusItem, Vocabulary, build_vocab, tokenize

TOY_CAPTIONS = ["red blue", "blue green red", "green", "red red blue", "blue"]


def toy_corpus(split="train", seed=0) -> Corpus:
    """Five images with 8-dim features and one caption each over a 3-word vocabulary."""
    rng = np.random.default_rng(seed)
    items = [
        CorpusItem(f"toy{i}", rng.normal(size=8), [tokenize(c)], split, [c])
        for i, c in enumerate(TOY_CAPTIONS)
    ]
    return Corpus(items, 8)


@pytest.fixture
def toy():
    train = toy_corpus("train")
    vocab = build_vocab(train.captions(), 1)
    return train, vocab


@pytest.fixture
def small_vocab():
    # K = 8: six words + END + UNK
    return Vocabulary(["w0", "w1", "w2", "w3", "w4", "w5"])


def tiny_model(vocab, guided=False, seed=0, feature_dim=6, embed=5, hidden=5, gdim=3, biases=True):
    return init_model(
        vocab, feature_dim, embed, hidden,
        guidance_dim=gdim if guided else None, seed=seed, biases=biases,
    )
