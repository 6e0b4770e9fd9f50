"""scikit-learn style wrapper: fit adapters on (prompt, target) token pairs, predict by greedy decoding."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import numerics as nx
from .exceptions import InputError
from .metrics import RouterTrace, trace_matrix
from .model import ToyTransformer, TransformerConfig, build_model, forward_batch, greedy_decode_batch
from .tasks import EOS, TaskSample
from .training import TrainConfig, train, transplant_base


def check_token_sequences(X, vocab_size=None, name="X", allow_empty_items=False) -> list[list[int]]:
    """Validate a collection of token sequences and return it as lists of Python ints."""
    if isinstance(X, (str, bytes)) or not hasattr(X, "__iter__"):
        raise InputError(f"{name} must be a sequence of token sequences, got {type(X).__name__}")
    out = []
    for i, seq in enumerate(X):
        if isinstance(seq, (str, bytes)) or not hasattr(seq, "__iter__"):
            raise InputError(f"{name}[{i}] must be a sequence of integer tokens")
        items = []
        for tok in seq:
            if isinstance(tok, (bool, np.bool_)) or not isinstance(tok, (int, np.integer)):
                raise InputError(f"{name}[{i}] contains non-integer token {tok!r}")
            tok = int(tok)
            if tok < 0 or (vocab_size is not None and tok >= vocab_size):
                raise InputError(f"{name}[{i}] token {tok} outside vocabulary [0, {vocab_size})")
            items.append(tok)
        if not items and not allow_empty_items:
            raise InputError(f"{name}[{i}] is empty")
        out.append(items)
    if not out:
        raise InputError(f"{name} is empty")
    return out


def check_pairs(X, y, vocab_size=None):
    X = check_token_sequences(X, vocab_size, "X")
    y = check_token_sequences(y, vocab_size, "y")
    if len(X) != len(y):
        raise InputError(f"X and y have different lengths ({len(X)} vs {len(y)})")
    return X, y


class RodeFineTuner(BaseEstimator):
    """Train a bank of LoRA experts with a router on top of a frozen toy transformer.

    ``X`` holds prompts and ``y`` the target continuations, both as integer
    token sequences.  Pass ``base`` to adapt an existing (pretrained) model;
    otherwise a randomly initialized frozen base is built from
    ``random_state``.
    """

    def __init__(self, strategy="lr", rank_list=(2, 4, 8, 16), d_model=16, n_heads=4, n_blocks=2,
                 max_seq_len=48, adapted_projections=("query", "value"), alpha=16.0, dropout_rate=0.05,
                 lr=3e-3, warmup_iters=20, total_iters=200, batch_size=4, grad_accum=1, weight_decay=0.0,
                 max_new_tokens=32, stop_token=EOS, vocab_size=None, base=None, random_state=0):
        self.strategy = strategy
        self.rank_list = rank_list
        self.d_model = d_model
        self.n_heads = n_heads
        self.n_blocks = n_blocks
        self.max_seq_len = max_seq_len
        self.adapted_projections = adapted_projections
        self.alpha = alpha
        self.dropout_rate = dropout_rate
        self.lr = lr
        self.warmup_iters = warmup_iters
        self.total_iters = total_iters
        self.batch_size = batch_size
        self.grad_accum = grad_accum
        self.weight_decay = weight_decay
        self.max_new_tokens = max_new_tokens
        self.stop_token = stop_token
        self.vocab_size = vocab_size
        self.base = base
        self.random_state = random_state

    def _model_config(self, vocab_size):
        if self.base is not None:
            return TransformerConfig(**{**self.base.config.to_dict(), "strategy": self.strategy,
                                        "rank_list": list(self.rank_list), "alpha": self.alpha,
                                        "dropout_rate": self.dropout_rate,
                                        "adapted_projections": list(self.adapted_projections)})
        return TransformerConfig(vocab_size=vocab_size, d_model=self.d_model, n_heads=self.n_heads,
                                 n_blocks=self.n_blocks, max_seq_len=self.max_seq_len,
                                 adapted_projections=tuple(self.adapted_projections),
                                 rank_list=tuple(self.rank_list), alpha=self.alpha,
                                 dropout_rate=self.dropout_rate, strategy=self.strategy)

    def fit(self, X, y):
        if self.base is not None and not isinstance(self.base, ToyTransformer):
            raise InputError(f"base must be a ToyTransformer, got {type(self.base).__name__}")
        vocab = self.base.config.vocab_size if self.base is not None else self.vocab_size
        X, y = check_pairs(X, y, vocab)
        if vocab is None:
            vocab = 1 + max(max(max(s) for s in X), max(max(s) for s in y), self.stop_token)
        cfg = self._model_config(vocab)
        model = build_model(cfg, nx.make_rng([self.random_state, 3]))
        if self.base is not None:
            transplant_base(self.base, model)
        samples = [TaskSample("fit", p, tuple(t), None) for p, t in zip(X, y)]
        tc = TrainConfig(lr=self.lr, warmup_iters=min(self.warmup_iters, self.total_iters),
                         total_iters=self.total_iters, batch_size=self.batch_size, grad_accum=self.grad_accum,
                         weight_decay=self.weight_decay, seed=self.random_state)
        result = train(model, samples, tc)
        self.model_ = model
        self.vocab_size_ = vocab
        self.train_loss_ = [r["loss"] for r in result.log]
        return self

    def predict(self, X) -> list[list[int]]:
        """Greedy continuation of each prompt, stopping after ``stop_token``."""
        check_is_fitted(self, "model_")
        X = check_token_sequences(X, self.vocab_size_)
        budget = min(self.max_new_tokens, self.model_.config.max_seq_len - max(len(p) for p in X))
        if budget < 1:
            raise InputError("prompts leave no room for generation within max_seq_len")
        return greedy_decode_batch(self.model_, X, budget, self.stop_token)

    def transform(self, X) -> np.ndarray:
        """Per-sample mean gate of every (block, projection, expert), flattened block-major."""
        check_is_fitted(self, "model_")
        X = check_token_sequences(X, self.vocab_size_)
        traces = [RouterTrace() for _ in X]
        for i in range(0, len(X), 32):
            forward_batch(self.model_, X[i:i + 32], traces=traces[i:i + 32])
        return np.stack([trace_matrix([t])[0].ravel() for t in traces])

    def fit_transform(self, X, y):
        return self.fit(X, y).transform(X)

    def get_feature_names_out(self, input_features=None):
        check_is_fitted(self, "model_")
        _, columns = trace_matrix([self._probe_trace()])
        return np.array([f"block{b}.{c}" for b in range(self.model_.config.n_blocks) for c in columns], dtype=object)

    def _probe_trace(self):
        t = RouterTrace()
        forward_batch(self.model_, [[self.stop_token]], traces=[t])
        return t

    def score(self, X, y) -> float:
        """Fraction of prompts whose greedy output reproduces the target exactly."""
        X, y = check_pairs(X, y, self.vocab_size_)
        preds = self.predict(X)
        return float(np.mean([p[: len(t)] == t for p, t in zip(preds, y)]))
