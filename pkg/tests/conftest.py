import numpy as np
import pytest

from warmseq.config import ModelConfig


def numeric_grad(f, array, h=1e-5):
    """Central differences of scalar ``f()`` with respect to ``array`` (edited in place)."""
    grad = np.zeros_like(array, dtype=np.float64)
    it = np.nditer(array, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = array[i]
        array[i] = old + h
        up = f()
        array[i] = old - h
        down = f()
        array[i] = old
        grad[i] = (up - down) / (2 * h)
    return grad


def rel_error(a, b):
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / scale


def tiny_config(**changes):
    base = dict(num_layers=2, hidden_size=8, filter_size=12, num_heads=2,
                input_vocab_size=11, output_vocab_size=11, max_positions=16, dropout=0.0)
    base.update(changes)
    return ModelConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
