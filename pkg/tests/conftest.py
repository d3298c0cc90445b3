import numpy as np
import pytest

from embattle.data import Dataset, Example, Vocab, build_vocab
from embattle.model import Arch, init_params


def make_vocab(words, rare=()):
    # repeat the stock so ordinary words are not frequency-rare
    return build_vocab([" ".join(words) for _ in range(3)], extra_rare=list(rare))


@pytest.fixture
def tiny_vocab():
    # ids: 0=<pad> 1=<unk> then sorted words, then rare extras
    return make_vocab(
        ["red", "blue", "green", "cold", "warm", "dry", "wet", "dark"],
        rare=["zq"],
    )


@pytest.fixture
def tiny_dataset(tiny_vocab):
    rng = np.random.default_rng(0)
    word_ids = [
        tiny_vocab.token_to_id[w]
        for w in ("red", "blue", "green", "cold", "warm", "dry", "wet", "dark")
    ]
    examples = []
    for i in range(40):
        label = i % 2
        # class 0 leans on the first half of the word stock, class 1 the second
        pool = word_ids[:4] if label == 0 else word_ids[4:]
        n = int(rng.integers(3, 7))
        toks = tuple(int(pool[int(j)]) for j in rng.integers(0, len(pool), size=n))
        examples.append(Example(toks, label))
    return Dataset(examples, num_classes=2, name="tiny")


@pytest.fixture
def tiny_params(tiny_vocab):
    arch = Arch(embed_dim=8, hidden_dim=6, num_classes=2, vocab_size=len(tiny_vocab))
    return init_params(arch, seed=0)
