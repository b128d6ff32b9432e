import numpy as np
import pytest

from q_models import DecisionContext, TabularNGramModel, TabularNGramSpec, init_model
from random_streams import stream


A, B, C, D = 1, 2, 3, 4
TOY_INPUT = (A,)


def log_row(probs, vocab_size=5):
    """Q-row whose softmax puts the given masses on the listed tokens (others ~e^-60)"""
    q = np.full(vocab_size, -60.0)
    for token, p in probs.items():
        q[token] = np.log(p)
    return q


@pytest.fixture
def toy_model() -> TabularNGramModel:
    """
    Two-step model over x = (A,): A 0.6 / B 0.4, then C 0.5 / D 0.5 after A and
    C 0.9 / D 0.1 after B, then EOS. Greedy finds (A, C) at 0.30, MAP is (B, C) at 0.36.
    """
    model = TabularNGramModel(TabularNGramSpec(order=1), vocab_size=5)
    model.set_row(DecisionContext(TOY_INPUT), log_row({A: 0.6, B: 0.4}))
    model.set_row(DecisionContext(TOY_INPUT, (A,)), log_row({C: 0.5, D: 0.5}))
    model.set_row(DecisionContext(TOY_INPUT, (B,)), log_row({C: 0.9, D: 0.1}))
    # order 1 keys on the last prefix token, so these rows also serve (B, C) and (B, D)
    model.set_row(DecisionContext(TOY_INPUT, (A, C)), log_row({0: 1.0}))
    model.set_row(DecisionContext(TOY_INPUT, (A, D)), log_row({0: 1.0}))
    return model


@pytest.fixture
def random_tabular_models():
    """Factory of seeded random order-1 tabular models with their inputs"""

    def build(count, seed=0, max_vocab=6, scale=2.0):
        rng = stream(seed, purpose="check")
        models = []
        for _ in range(count):
            d = int(rng.integers(3, max_vocab + 1))
            model = init_model(TabularNGramSpec(order=1), d)
            model.params[:] = rng.normal(scale=scale, size=model.params.shape[0])
            x = tuple(int(t) for t in rng.integers(1, d, size=int(rng.integers(1, 3))))
            models.append((model, x))
        return models

    return build


@pytest.fixture
def random_family_models():
    """Factory of seeded random models of one family, each with a batch drawn from `task`"""

    def build(spec, task, count=20, seed=0, batch_size=4, scale=0.5):
        models = []
        for index in range(count):
            rng = stream(seed, worker_id=index, purpose="check")
            model = init_model(spec, task.vocab_size, seed=seed + index)
            model.params[:] = rng.normal(scale=scale, size=model.layout.size)
            models.append((model, [task.sample_pair(rng) for _ in range(batch_size)]))
        return models

    return build
