import numpy as np
import pytest

from rode import numerics as nx
from rode.model import TransformerConfig, build_model
from rode.tasks import generate_world


def numeric_grad(f, x, eps=1e-5):
    """Central differences of scalar ``f`` w.r.t. every entry of array ``x`` (mutated and restored)."""
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + eps
        fp = f()
        x[idx] = old - eps
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * eps)
    return g


def rel_error(a, b, floor=1e-8):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


@pytest.fixture(scope="session")
def world():
    return generate_world(0)


@pytest.fixture
def toy_model(world):
    cfg = TransformerConfig(vocab_size=world.vocab.size, d_model=16, n_blocks=2, rank_list=(2, 4, 8, 16))
    return build_model(cfg, nx.make_rng(7))


def randomize_adapters(model, rng, scale=0.3):
    """Give every B a nonzero value so router and A gradients are exercised."""
    for _, _, layer in model.rode_layers():
        for e in layer.experts:
            e.b_up.value = rng.normal(0.0, scale, size=e.b_up.shape)
        layer.router.weight.value = rng.normal(0.0, 0.5, size=layer.router.weight.shape)
        layer.router.bias.value = rng.normal(0.0, 0.3, size=layer.router.bias.shape)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
