"""Low-rank adapter experts."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .exceptions import ConfigurationError, DimensionError

DEFAULT_RANKS = (2, 4, 8, 16)


@dataclass(eq=False)
class LoraExpert:
    """One adapter ``(alpha / rank) * B @ A`` with A: (rank, d_in), B: (d_out, rank)."""

    a_down: nx.Node
    b_up: nx.Node
    alpha: float = 16.0
    dropout_rate: float = 0.05

    def __post_init__(self):
        if self.a_down.rows != self.b_up.cols:
            raise ConfigurationError(
                f"rank mismatch: A has {self.a_down.rows} rows, B has {self.b_up.cols} columns"
            )

    @property
    def rank(self) -> int:
        return self.a_down.rows

    @property
    def d_in(self) -> int:
        return self.a_down.cols

    @property
    def d_out(self) -> int:
        return self.b_up.rows

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def parameters(self):
        return {"a_down": self.a_down, "b_up": self.b_up}

    def parameter_count(self) -> int:
        return self.rank * (self.d_in + self.d_out)


def check_rank(rank: int, d_in: int, d_out: int):
    # Full rank is tolerated so the d_model=16 / rank-16 toy configuration builds.
    if int(rank) != rank or rank < 1 or rank > min(d_in, d_out):
        raise ConfigurationError(
            f"rank must be an integer in [1, min(d_in, d_out)] = [1, {min(d_in, d_out)}], got {rank}"
        )


def new_expert(d_in, d_out, rank, alpha=16.0, dropout_rate=0.05, rng=None) -> LoraExpert:
    """A ~ N(0, std=1/rank), B = 0, so the expert's output starts at exactly zero."""
    check_rank(rank, d_in, d_out)
    if alpha <= 0:
        raise ConfigurationError(f"alpha must be positive, got {alpha}")
    if not 0.0 <= dropout_rate < 1.0:
        raise ConfigurationError(f"dropout_rate must be in [0, 1), got {dropout_rate}")
    if rng is None:
        raise ConfigurationError("new_expert needs an explicit rng")
    a = rng.normal(0.0, 1.0 / rank, size=(rank, d_in))
    return LoraExpert(
        a_down=nx.parameter(a, name="a_down"),
        b_up=nx.parameter(np.zeros((d_out, rank)), name="b_up"),
        alpha=float(alpha),
        dropout_rate=float(dropout_rate),
    )


def expert_forward(e: LoraExpert, x: nx.Node, train_mode=False, rng=None) -> nx.Node:
    if x.rows != e.d_in:
        raise DimensionError(f"expert expects {e.d_in} input rows, got {x.shape}")
    x = nx.dropout(x, e.dropout_rate, rng, train_mode)
    return nx.scale(nx.matmul(e.b_up, nx.matmul(e.a_down, x)), e.scale)
