import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from instcache.model import NgramModel, train_ngram_texts  # noqa: E402

TOY_TEXTS = [
    "what is ai",
    "what is ai",
    "what is ml",
    "explain ai",
    "explain ml to me",
    "write a poem",
    "write a poem about ai",
    "what is a poem",
]


@pytest.fixture
def toy_artifact():
    return train_ngram_texts(TOY_TEXTS, order=3, smoothing_alpha=0.1)


@pytest.fixture
def toy_ngram(toy_artifact):
    return NgramModel(toy_artifact, max_len=5)
