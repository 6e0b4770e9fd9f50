"""Per-token gates over an expert bank.

Three strategies:

* ``"lr"``: ReLU of the router's affine output (linear-rectified).
* ``"softmax"``: softmax over experts.
* ``"top1"``: the softmax probability of the argmax expert, zero elsewhere.
  Gradient reaches the router through the selected probability only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .exceptions import ConfigurationError, DimensionError

STRATEGIES = ("lr", "softmax", "top1")


def check_strategy(strategy: str) -> str:
    s = str(strategy).lower()
    if s not in STRATEGIES:
        raise ConfigurationError(f"strategy must be one of {STRATEGIES}, got {strategy!r}")
    return s


@dataclass(eq=False)
class Router:
    weight: nx.Node  # (n_experts, d_in)
    bias: nx.Node  # (n_experts, 1)
    strategy: str = "lr"

    def __post_init__(self):
        self.strategy = check_strategy(self.strategy)
        if self.bias.shape != (self.weight.rows, 1):
            raise ConfigurationError(
                f"router bias must be ({self.weight.rows}, 1), got {self.bias.shape}"
            )

    @property
    def n_experts(self) -> int:
        return self.weight.rows

    @property
    def d_in(self) -> int:
        return self.weight.cols

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias}

    def parameter_count(self) -> int:
        return self.weight.value.size + self.bias.value.size


def new_router(d_in, n_experts, strategy="lr", rng=None, init_std=0.02) -> Router:
    if rng is None:
        raise ConfigurationError("new_router needs an explicit rng")
    return Router(
        weight=nx.parameter(rng.normal(0.0, init_std, size=(n_experts, d_in)), name="router.weight"),
        bias=nx.parameter(np.zeros((n_experts, 1)), name="router.bias"),
        strategy=strategy,
    )


def router_logits(r: Router, x: nx.Node) -> nx.Node:
    if x.rows != r.d_in:
        raise DimensionError(f"router expects {r.d_in} input rows, got {x.shape}")
    return nx.add(nx.matmul(r.weight, x), r.bias)


def gates_from_logits(logits: nx.Node, strategy: str) -> nx.Node:
    """Apply a strategy to ``(n_experts, tokens)`` logits column by column."""
    strategy = check_strategy(strategy)
    if strategy == "lr":
        return nx.relu(logits)
    probs = nx.softmax(logits, axis=0)
    if strategy == "softmax":
        return probs
    onehot = np.zeros(logits.shape)
    onehot[np.argmax(logits.value, axis=0), np.arange(logits.cols)] = 1.0
    return nx.mul(probs, nx.constant(onehot))


def route(r: Router, x: nx.Node) -> nx.Node:
    """Gate matrix of shape ``(n_experts, tokens)``; column t gates token t."""
    return gates_from_logits(router_logits(r, x), r.strategy)


def gate_sparsity(g, threshold: float = 0.0) -> float:
    """Fraction of gate entries that are ``<= threshold``."""
    values = g.value if isinstance(g, nx.Node) else np.asarray(g, dtype=float)
    if values.size == 0:
        return 0.0
    return float(np.count_nonzero(values <= threshold)) / values.size
