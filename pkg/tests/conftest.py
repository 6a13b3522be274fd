import numpy as np
import pytest

from ctrlcap.captioner import Captioner, Dims, init_params
from ctrlcap.corpus import Corpus, ImageInstance, SynthConfig, generate_synthetic
from ctrlcap.signals import ControlSpace

TINY_TAGS = {"a": "OTHER", "dog": "OTHER", "is": "BE", "running": "VERB_ING", "runs": "VERB_BASE"}


def tiny_corpus(n_images=4, seed=0):
    """A handful of images over a 5-word vocabulary (V = 8 with reserved ids)."""
    rng = np.random.default_rng(seed)
    caps = [("a", "dog", "runs"), ("a", "dog", "is", "running"), ("dog", "runs"),
            ("a", "dog"), ("a", "dog", "running", "a", "dog", "runs", "a", "dog", "runs")]
    images = [ImageInstance(f"t{i}", rng.normal(size=6), [caps[(i + j) % len(caps)] for j in range(3)])
              for i in range(n_images)]
    return Corpus(images, dict(TINY_TAGS))


def make_model(corpus, task="length", d=8, dropout=0.0, seed=0, positional=False):
    space = ControlSpace.for_task(task)
    dims = Dims(len(corpus.vocab), corpus.feature_dim, space.num_levels, d, dropout, positional)
    return Captioner(init_params(seed, dims), space, corpus.vocab, corpus.tags, task)


@pytest.fixture
def tiny():
    return tiny_corpus()


@pytest.fixture(scope="session")
def synth_small():
    return generate_synthetic(SynthConfig(num_images=40, seed=3))
