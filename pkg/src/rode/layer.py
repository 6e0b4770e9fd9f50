"""The adapted linear layer: frozen base projection plus a gated expert bank.

    out = W0 @ x + sum_i gate_i(x) * (alpha / r_i) * B_i @ A_i @ x

Under the softmax strategy this is the classic softmax mixture of LoRA
experts; under ``"lr"`` the gates are rectified and may be exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .adapters import DEFAULT_RANKS, LoraExpert, expert_forward, new_expert
from .exceptions import ConfigurationError, DimensionError
from .routing import Router, gates_from_logits, new_router, router_logits


@dataclass(eq=False)
class RodeLayer:
    w0: nx.Node  # (d_out, d_in), frozen
    experts: list[LoraExpert]
    router: Router
    # Number of token columns each expert actually processed (zero-gated columns are skipped).
    columns_computed: list[int] = field(default_factory=list)
    # Router pre-activations from the most recent routed forward pass.
    last_logits: np.ndarray | None = None

    def __post_init__(self):
        self.w0.requires_grad = False
        d_out, d_in = self.w0.shape
        for i, e in enumerate(self.experts):
            if (e.d_in, e.d_out) != (d_in, d_out):
                raise ConfigurationError(
                    f"expert {i} maps {e.d_in}->{e.d_out}, base maps {d_in}->{d_out}"
                )
        if self.router.n_experts != len(self.experts) or self.router.d_in != d_in:
            raise ConfigurationError(
                f"router shape {self.router.weight.shape} does not fit "
                f"{len(self.experts)} experts on {d_in} inputs"
            )
        self.columns_computed = [0] * len(self.experts)

    @property
    def d_in(self) -> int:
        return self.w0.cols

    @property
    def d_out(self) -> int:
        return self.w0.rows

    @property
    def ranks(self) -> list[int]:
        return [e.rank for e in self.experts]

    @property
    def strategy(self) -> str:
        return self.router.strategy

    def trainable_parameters(self) -> dict[str, nx.Node]:
        params = {}
        for i, e in enumerate(self.experts):
            params[f"expert{i}.a_down"] = e.a_down
            params[f"expert{i}.b_up"] = e.b_up
        params["router.weight"] = self.router.weight
        params["router.bias"] = self.router.bias
        return params


def new_rode_layer(w0, ranks=DEFAULT_RANKS, alpha=16.0, dropout_rate=0.05, strategy="lr", rng=None) -> RodeLayer:
    if rng is None:
        raise ConfigurationError("new_rode_layer needs an explicit rng")
    w0 = w0 if isinstance(w0, nx.Node) else nx.constant(w0)
    d_out, d_in = w0.shape
    experts = [new_expert(d_in, d_out, r, alpha, dropout_rate, rng) for r in ranks]
    router = new_router(d_in, len(experts), strategy, rng)
    return RodeLayer(w0=w0, experts=experts, router=router)


def rode_forward(layer: RodeLayer, x: nx.Node, train_mode=False, rng=None, gates=None, gate_sink=None) -> nx.Node:
    """Adapted output for token columns ``x`` of shape ``(d_in, tokens)``.

    ``gates`` overrides the router with a fixed ``(n_experts, tokens)`` matrix
    (array or Node).  ``gate_sink`` receives the gate values actually used.
    """
    if x.rows != layer.d_in:
        raise DimensionError(f"layer expects {layer.d_in} input rows, got {x.shape}")
    out = nx.matmul(layer.w0, x)
    if not layer.experts:
        return out
    n_tokens = x.cols
    if gates is None:
        logits = router_logits(layer.router, x)
        layer.last_logits = logits.value
        gates = gates_from_logits(logits, layer.router.strategy)
    elif not isinstance(gates, nx.Node):
        gates = nx.constant(gates)
    if gates.shape != (len(layer.experts), n_tokens):
        raise DimensionError(f"gates must be {(len(layer.experts), n_tokens)}, got {gates.shape}")
    if gate_sink is not None:
        gate_sink(gates.value)

    for i, expert in enumerate(layer.experts):
        active = np.flatnonzero(gates.value[i] != 0.0)
        if active.size == 0:
            continue
        layer.columns_computed[i] += int(active.size)
        gate_row = nx.take_rows(gates, i, i + 1)
        if active.size == n_tokens:
            xi = x
        else:
            xi = nx.take_columns(x, active)
            gate_row = nx.take_columns(gate_row, active)
        delta = expert_forward(expert, xi, train_mode, rng)
        spread = nx.matmul(nx.constant(np.ones((layer.d_out, 1))), gate_row)
        delta = nx.mul(spread, delta)
        if active.size != n_tokens:
            delta = nx.place_columns(delta, active, n_tokens)
        out = nx.add(out, delta)
    return out


def trainable_parameter_count(layer: RodeLayer) -> int:
    """Sum of r_i * (d_in + d_out) over experts, plus router weight and bias."""
    return sum(e.parameter_count() for e in layer.experts) + layer.router.parameter_count()
