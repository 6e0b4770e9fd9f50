"""Toy decoder-only transformer with RoDE-adapted attention projections.

Everything except the adapter experts and routers is frozen once the
surrogate "pretraining" is done (see :func:`rode.training.pretrain_base`).
Several sequences can be run at once: their token columns are concatenated
and attention is masked to be block-diagonal and causal.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .adapters import DEFAULT_RANKS, check_rank
from .exceptions import ConfigurationError, InputError
from .layer import RodeLayer, new_rode_layer, rode_forward
from .routing import check_strategy

PROJECTIONS = ("query", "key", "value", "output")


@dataclass
class TransformerConfig:
    vocab_size: int
    d_model: int = 16
    n_heads: int = 4
    n_blocks: int = 2
    max_seq_len: int = 48
    adapted_projections: tuple[str, ...] = ("query", "value")
    rank_list: tuple[int, ...] = DEFAULT_RANKS
    alpha: float = 16.0
    dropout_rate: float = 0.05
    strategy: str = "lr"
    ffn_mult: int = 4

    def __post_init__(self):
        self.adapted_projections = tuple(self.adapted_projections)
        self.rank_list = tuple(int(r) for r in self.rank_list)
        self.validate()

    def validate(self):
        for name in ("vocab_size", "d_model", "n_heads", "n_blocks", "max_seq_len", "ffn_mult"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ConfigurationError(f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})")
        if not self.rank_list:
            raise ConfigurationError("rank_list must be nonempty")
        for r in self.rank_list:
            try:
                check_rank(r, self.d_model, self.d_model)
            except ConfigurationError as exc:
                raise ConfigurationError(f"rank_list entry {r}: {exc}") from None
        bad = set(self.adapted_projections) - set(PROJECTIONS)
        if bad or not self.adapted_projections:
            raise ConfigurationError(f"adapted_projections must be a nonempty subset of {PROJECTIONS}, got {self.adapted_projections}")
        if self.alpha <= 0:
            raise ConfigurationError(f"alpha must be positive, got {self.alpha}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigurationError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        self.strategy = check_strategy(self.strategy)

    def to_dict(self):
        d = asdict(self)
        d["adapted_projections"] = list(self.adapted_projections)
        d["rank_list"] = list(self.rank_list)
        return d


@dataclass(eq=False)
class Block:
    ln1_gain: nx.Node
    ln1_bias: nx.Node
    proj: dict  # name -> RodeLayer | Node (frozen weight)
    ln2_gain: nx.Node
    ln2_bias: nx.Node
    ffn_w1: nx.Node
    ffn_b1: nx.Node
    ffn_w2: nx.Node
    ffn_b2: nx.Node


@dataclass(eq=False)
class ToyTransformer:
    config: TransformerConfig
    token_embedding: nx.Node  # (d_model, vocab)
    position_embedding: nx.Node  # (d_model, max_seq_len)
    blocks: list[Block]
    lnf_gain: nx.Node
    lnf_bias: nx.Node
    head: nx.Node  # (vocab, d_model)
    pretrained: bool = field(default=False)

    def rode_layers(self):
        for b, block in enumerate(self.blocks):
            for name in PROJECTIONS:
                p = block.proj[name]
                if isinstance(p, RodeLayer):
                    yield b, name, p

    def named_parameters(self) -> dict[str, nx.Node]:
        """Every parameter in a fixed order, trainable and frozen alike."""
        out = {"embed.token": self.token_embedding, "embed.position": self.position_embedding}
        for b, block in enumerate(self.blocks):
            pre = f"block{b}."
            out[pre + "ln1.gain"] = block.ln1_gain
            out[pre + "ln1.bias"] = block.ln1_bias
            for name in PROJECTIONS:
                p = block.proj[name]
                if isinstance(p, RodeLayer):
                    out[f"{pre}{name}.w0"] = p.w0
                    for k, v in p.trainable_parameters().items():
                        out[f"{pre}{name}.{k}"] = v
                else:
                    out[f"{pre}{name}.w0"] = p
            out[pre + "ln2.gain"] = block.ln2_gain
            out[pre + "ln2.bias"] = block.ln2_bias
            out[pre + "ffn.w1"] = block.ffn_w1
            out[pre + "ffn.b1"] = block.ffn_b1
            out[pre + "ffn.w2"] = block.ffn_w2
            out[pre + "ffn.b2"] = block.ffn_b2
        out["lnf.gain"] = self.lnf_gain
        out["lnf.bias"] = self.lnf_bias
        out["head.weight"] = self.head
        return out

    def trainable_parameters(self) -> dict[str, nx.Node]:
        out = {}
        for b, name, layer in self.rode_layers():
            for k, v in layer.trainable_parameters().items():
                out[f"block{b}.{name}.{k}"] = v
        return out

    def base_parameters(self) -> dict[str, nx.Node]:
        trainable = set(self.trainable_parameters())
        return {k: v for k, v in self.named_parameters().items() if k not in trainable}

    def freeze_base(self):
        for p in self.base_parameters().values():
            p.requires_grad = False
        for p in self.trainable_parameters().values():
            p.requires_grad = True

    def zero_grad(self):
        for p in self.named_parameters().values():
            p.zero_grad()


def build_model(config: TransformerConfig, rng) -> ToyTransformer:
    d, v = config.d_model, config.vocab_size
    hidden = config.ffn_mult * d

    def frozen(shape, std):
        return nx.constant(rng.normal(0.0, std, size=shape))

    blocks = []
    for _ in range(config.n_blocks):
        proj = {}
        for name in PROJECTIONS:
            w = frozen((d, d), 1.0 / math.sqrt(d))
            if name in config.adapted_projections:
                proj[name] = new_rode_layer(
                    w, config.rank_list, config.alpha, config.dropout_rate, config.strategy, rng
                )
            else:
                proj[name] = w
        blocks.append(Block(
            ln1_gain=nx.constant(np.ones((d, 1))), ln1_bias=nx.constant(np.zeros((d, 1))),
            proj=proj,
            ln2_gain=nx.constant(np.ones((d, 1))), ln2_bias=nx.constant(np.zeros((d, 1))),
            ffn_w1=frozen((hidden, d), 1.0 / math.sqrt(d)), ffn_b1=nx.constant(np.zeros((hidden, 1))),
            ffn_w2=frozen((d, hidden), 1.0 / math.sqrt(hidden) / math.sqrt(2 * config.n_blocks)),
            ffn_b2=nx.constant(np.zeros((d, 1))),
        ))
    model = ToyTransformer(
        config=config,
        token_embedding=frozen((d, v), 1.0),
        position_embedding=frozen((d, config.max_seq_len), 0.1),
        blocks=blocks,
        lnf_gain=nx.constant(np.ones((d, 1))), lnf_bias=nx.constant(np.zeros((d, 1))),
        head=frozen((v, d), 1.0 / math.sqrt(d)),
    )
    model.freeze_base()
    return model


def check_tokens(model: ToyTransformer, tokens) -> list[int]:
    tokens = [int(t) for t in tokens]
    if not tokens:
        raise InputError("token sequence is empty")
    if len(tokens) > model.config.max_seq_len:
        raise InputError(f"sequence length {len(tokens)} exceeds max_seq_len {model.config.max_seq_len}")
    if min(tokens) < 0 or max(tokens) >= model.config.vocab_size:
        raise InputError(f"token id out of range [0, {model.config.vocab_size})")
    return tokens


def _attention_mask(lengths):
    seg = np.repeat(np.arange(len(lengths)), lengths)
    pos = np.concatenate([np.arange(n) for n in lengths])
    return (seg[:, None] == seg[None, :]) & (pos[None, :] <= pos[:, None]), pos


def _attention(model, block, h, mask, train_mode, rng, sink_for):
    cfg = model.config
    d_head = cfg.d_model // cfg.n_heads

    def project(name, x):
        p = block.proj[name]
        if isinstance(p, RodeLayer):
            return rode_forward(p, x, train_mode, rng, gate_sink=sink_for(name))
        return nx.matmul(p, x)

    q, k, v = project("query", h), project("key", h), project("value", h)
    heads = []
    for i in range(cfg.n_heads):
        lo, hi = i * d_head, (i + 1) * d_head
        qh, kh, vh = nx.take_rows(q, lo, hi), nx.take_rows(k, lo, hi), nx.take_rows(v, lo, hi)
        scores = nx.scale(nx.matmul(nx.transpose(qh), kh), 1.0 / math.sqrt(d_head))
        attn = nx.softmax(scores, axis=1, mask=mask)
        heads.append(nx.matmul(vh, nx.transpose(attn)))
    return project("output", nx.concat_rows(heads))


def forward_batch(model: ToyTransformer, sequences, train_mode=False, rng=None, traces=None) -> nx.Node:
    """Logits of shape ``(sum of lengths, vocab)`` for several sequences at once.

    ``traces`` (optional) aligns with ``sequences``; each non-None entry gets a
    ``record(block, projection, position, gates)`` call per token.
    """
    seqs = [check_tokens(model, s) for s in sequences]
    lengths = [len(s) for s in seqs]
    mask, pos = _attention_mask(lengths)
    ids = np.concatenate([np.asarray(s) for s in seqs])
    bounds = np.cumsum([0] + lengths)

    h = nx.add(
        nx.embedding_lookup(model.token_embedding, ids),
        nx.embedding_lookup(model.position_embedding, pos),
    )
    for b, block in enumerate(model.blocks):
        def sink_for(name, b=b):
            if not traces or all(t is None for t in traces):
                return None

            def sink(gates):
                for j, tr in enumerate(traces):
                    if tr is None:
                        continue
                    for t in range(lengths[j]):
                        tr.record(b, name, t, gates[:, bounds[j] + t])
            return sink

        a = nx.layer_norm(h, block.ln1_gain, block.ln1_bias)
        h = nx.add(h, _attention(model, block, a, mask, train_mode, rng, sink_for))
        f = nx.layer_norm(h, block.ln2_gain, block.ln2_bias)
        f = nx.gelu(nx.add(nx.matmul(block.ffn_w1, f), block.ffn_b1))
        h = nx.add(h, nx.add(nx.matmul(block.ffn_w2, f), block.ffn_b2))
    h = nx.layer_norm(h, model.lnf_gain, model.lnf_bias)
    return nx.transpose(nx.matmul(model.head, h))


def forward_logits(model: ToyTransformer, tokens, train_mode=False, rng=None, trace=None) -> nx.Node:
    """``(len(tokens), vocab)`` logits; row t depends only on tokens[:t+1]."""
    return forward_batch(model, [tokens], train_mode, rng, [trace] if trace is not None else None)


def _loss_layout(model, pairs):
    inputs, rows, targets = [], [], []
    offset = 0
    for prompt, target in pairs:
        prompt, target = list(prompt), list(target)
        if not prompt:
            raise InputError("prompt is empty")
        if not target:
            raise InputError("target is empty")
        if len(prompt) + len(target) > model.config.max_seq_len:
            raise InputError(
                f"prompt+target length {len(prompt) + len(target)} exceeds max_seq_len {model.config.max_seq_len}"
            )
        seq = prompt + target[:-1]
        inputs.append(seq)
        rows.extend(range(offset + len(prompt) - 1, offset + len(seq)))
        targets.extend(target)
        offset += len(seq)
    return inputs, np.asarray(rows), targets


def batch_loss(model: ToyTransformer, pairs, train_mode=False, rng=None, traces=None, per_pair=False):
    """Mean cross-entropy over all target tokens of several (prompt, target) pairs.

    With ``per_pair`` also returns ``[(summed nll, n_tokens), ...]`` per pair.
    """
    inputs, rows, targets = _loss_layout(model, pairs)
    logits = forward_batch(model, inputs, train_mode, rng, traces)
    picked = nx.transpose(nx.take_columns(nx.transpose(logits), rows))
    loss = nx.cross_entropy(picked, targets)
    if not per_pair:
        return loss
    x = picked.value
    m = x.max(axis=1)
    nll = np.log(np.exp(x - m[:, None]).sum(axis=1)) + m - x[np.arange(len(targets)), targets]
    out, start = [], 0
    for _, target in pairs:
        out.append((float(nll[start:start + len(target)].sum()), len(target)))
        start += len(target)
    return loss, out


def autoregressive_loss(model: ToyTransformer, prompt, target, train_mode=False, rng=None, trace=None) -> nx.Node:
    """Mean next-token cross-entropy over target positions; the prompt is not scored."""
    return batch_loss(model, [(prompt, target)], train_mode, rng, [trace] if trace is not None else None)


def greedy_decode_batch(model: ToyTransformer, prompts, max_new_tokens, stop_id, traces=None, chunk=32) -> list[list[int]]:
    """Argmax decoding of several prompts in lockstep (no cache; full recompute per step).

    Prompts are processed ``chunk`` at a time to bound the attention matrix size.
    """
    prompts = list(prompts)
    if len(prompts) > chunk:
        out = []
        for i in range(0, len(prompts), chunk):
            sub = traces[i:i + chunk] if traces else None
            out.extend(greedy_decode_batch(model, prompts[i:i + chunk], max_new_tokens, stop_id, sub, chunk))
        return out
    seqs = [check_tokens(model, p) for p in prompts]
    outs = [[] for _ in seqs]
    live = [i for i in range(len(seqs)) if max_new_tokens > 0]
    while live:
        live = [i for i in live if len(seqs[i]) < model.config.max_seq_len]
        if not live:
            break
        logits = forward_batch(model, [seqs[i] for i in live]).value
        ends = np.cumsum([len(seqs[i]) for i in live]) - 1
        nxt = np.argmax(logits[ends], axis=1)
        still = []
        for i, tok in zip(live, nxt):
            tok = int(tok)
            seqs[i].append(tok)
            outs[i].append(tok)
            if tok != stop_id and len(outs[i]) < max_new_tokens:
                still.append(i)
        live = still
    if traces:
        # one final pass records gates over the whole prompt + continuation
        todo = [i for i, t in enumerate(traces) if t is not None]
        if todo:
            forward_batch(model, [seqs[i] for i in todo], traces=[traces[i] for i in todo])
    return outs


def greedy_decode(model: ToyTransformer, prompt, max_new_tokens, stop_id, trace=None) -> list[int]:
    return greedy_decode_batch(model, [prompt], max_new_tokens, stop_id, [trace] if trace is not None else None)[0]
