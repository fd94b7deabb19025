import numpy as np
import pytest

from lagcausal.corpus import CorpusSpec, example_instance, generate
from lagcausal.model import ToyPredictor, TrainConfig, train
from lagcausal.tscm import Kind, MechanismPolicy

LINEAR = MechanismPolicy(kinds=(Kind.LINEAR,))


def linear_spec(count, seed=0, **kw):
    kw.setdefault("vars", (3, 5))
    kw.setdefault("density", (0.2, 0.2))
    return CorpusSpec(count=count, policy=kw.pop("policy", LINEAR), seed=seed, **kw)


@pytest.fixture(scope="session")
def example():
    return example_instance(seed=0)


@pytest.fixture(scope="session")
def linear_corpus():
    """Small linear-only corpus shared by the model and acceptance tests."""
    return generate(linear_spec(120, seed=11))


@pytest.fixture(scope="session")
def trained_toy(linear_corpus):
    model = ToyPredictor.init(5, 3, hidden=64, seed=0)
    model, hist = train(linear_corpus, model, cfg=TrainConfig(epochs=30, seed=0))
    return model, hist


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
