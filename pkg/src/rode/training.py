"""AdamW, warmup/decay schedule, the training loop, checkpoints and gradient checks."""

from __future__ import annotations

import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .exceptions import (
    ConfigurationError,
    DataError,
    NumericalError,
    TrainingDivergedError,
    UsageError,
)
from .model import (
    TransformerConfig,
    ToyTransformer,
    autoregressive_loss,
    batch_loss,
    build_model,
)
from .tasks import TASKS, SyntheticWorld, sample_batch

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 3e-4
    warmup_iters: int = 100
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 4
    grad_accum: int = 10
    epochs: int = 1
    seed: int = 0
    total_iters: int = 1000

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        self.validate()

    def validate(self):
        if not self.lr > 0 or not math.isfinite(self.lr):
            raise ConfigurationError(f"lr must be a positive finite number, got {self.lr}")
        if self.total_iters < 1:
            raise ConfigurationError(f"total_iters must be >= 1, got {self.total_iters}")
        if not 0 <= self.warmup_iters <= self.total_iters:
            raise ConfigurationError(
                f"warmup_iters must be in [0, total_iters={self.total_iters}], got {self.warmup_iters}"
            )
        if self.weight_decay < 0:
            raise ConfigurationError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigurationError(f"betas must be two values in [0, 1), got {self.betas}")
        for name in ("batch_size", "grad_accum", "epochs"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")

    @property
    def optimizer_steps(self) -> int:
        return self.total_iters * self.epochs

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


def lr_at(cfg: TrainConfig, step: int) -> float:
    """Linear warmup from 0 to ``cfg.lr``, then linear decay to 0 at ``total_iters``."""
    if not 0 <= step <= cfg.total_iters:
        raise UsageError(f"step must be in [0, {cfg.total_iters}], got {step}")
    if step < cfg.warmup_iters:
        return cfg.lr * step / cfg.warmup_iters
    if step == cfg.warmup_iters:
        return cfg.lr
    return cfg.lr * (cfg.total_iters - step) / (cfg.total_iters - cfg.warmup_iters)


@dataclass
class OptimizerState:
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(params: dict, grads: dict, state: OptimizerState, lr: float,
               betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
    """One decoupled-weight-decay Adam update.

    Parameter values are replaced by new arrays, never mutated in place.
    Only names present in ``grads`` are touched.
    """
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise TrainingDivergedError(f"non-finite gradient for parameter {name!r}", step=state.step)
        if g.shape != params[name].value.shape:
            raise DataError(f"gradient shape {g.shape} != parameter shape {params[name].value.shape} for {name!r}")
    b1, b2 = betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, g in grads.items():
        p = params[name]
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.first_moment[name] = m
        state.second_moment[name] = v
        value = p.value
        if weight_decay:
            value = value * (1.0 - lr * weight_decay)
        p.value = value - lr * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------- data


def _pairs(samples):
    return [(s.prompt, s.target) for s in samples]


class SampleSource:
    """Micro-batches drawn either from a world (with a task mix) or from a fixed sample list."""

    def __init__(self, data, task_mix=None):
        self.world = data if isinstance(data, SyntheticWorld) else None
        self.samples = None if self.world is not None else list(data)
        if self.samples is not None and not self.samples:
            raise ConfigurationError("training data is empty")
        self.task_mix = task_mix if task_mix is not None else (1.0,) * len(TASKS)

    def draw(self, batch_size, rng):
        if self.world is not None:
            return sample_batch(self.world, self.task_mix, batch_size, rng)
        idx = rng.integers(len(self.samples), size=batch_size)
        return [self.samples[int(i)] for i in idx]


def micro_batch_loss(model, samples, train_mode, rng):
    """Token-mean loss of one micro-batch plus per-task mean losses for logging."""
    loss, per_pair = batch_loss(model, _pairs(samples), train_mode, rng, per_pair=True)
    by_task = {}
    for s, (total, count) in zip(samples, per_pair):
        acc = by_task.setdefault(s.task_id, [0.0, 0])
        acc[0] += total
        acc[1] += count
    return loss, {k: v[0] / v[1] for k, v in by_task.items()}


def accumulate_gradients(model, micro_batches, train_mode=False, rng=None):
    """Backpropagate the mean of per-micro-batch losses; return (mean loss, per-task losses)."""
    n = len(micro_batches)
    total, task_sum, task_n = 0.0, {}, {}
    for samples in micro_batches:
        loss, by_task = micro_batch_loss(model, samples, train_mode, rng)
        nx.backward(nx.scale(loss, 1.0 / n))
        total += float(loss.value[0, 0])
        for k, v in by_task.items():
            task_sum[k] = task_sum.get(k, 0.0) + v
            task_n[k] = task_n.get(k, 0) + 1
    return total / n, {k: task_sum[k] / task_n[k] for k in sorted(task_sum)}


# ---------------------------------------------------------------- training loop


@dataclass
class TrainResult:
    model: ToyTransformer
    log: list[dict]
    checkpoint_path: Path | None = None


def _optimize(model, params, source, cfg: TrainConfig, rng, log_path=None, timing_path=None,
              checkpoint_path=None, extra=None):
    data_rng, dropout_rng = nx.split_rng(rng, 2)
    state = OptimizerState()
    log = []
    n_steps = cfg.optimizer_steps
    sched = TrainConfig(**{**cfg.to_dict(), "total_iters": n_steps,
                           "warmup_iters": min(cfg.warmup_iters, n_steps), "epochs": 1})
    last_good = {k: p.value for k, p in params.items()}
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    time_fh = open(timing_path, "w", encoding="utf-8") if timing_path else None
    t0 = time.perf_counter()
    try:
        for step in range(n_steps):
            lr = lr_at(sched, step)
            model.zero_grad()
            batches = [source.draw(cfg.batch_size, data_rng) for _ in range(cfg.grad_accum)]
            try:
                loss, by_task = accumulate_gradients(model, batches, True, dropout_rng)
            except NumericalError as exc:
                loss, by_task = float("nan"), {}
                logger.error("numerical failure at step %d: %s", step, exc)
            if not math.isfinite(loss):
                _abort(model, params, last_good, step, checkpoint_path, extra)
            grads = {k: p.grad for k, p in params.items()}
            try:
                adamw_step(params, grads, state, lr, cfg.betas, cfg.eps, cfg.weight_decay)
            except TrainingDivergedError:
                _abort(model, params, last_good, step, checkpoint_path, extra)
            last_good = {k: p.value for k, p in params.items()}
            record = {"step": step + 1, "lr": lr, "loss": loss, "task_loss": by_task}
            log.append(record)
            if log_fh:
                log_fh.write(json.dumps(record, sort_keys=True) + "\n")
            if time_fh:
                time_fh.write(json.dumps({"step": step + 1, "wall_time": time.perf_counter() - t0}) + "\n")
            if (step + 1) % 100 == 0:
                logger.info("step %d/%d lr=%.3g loss=%.4f", step + 1, n_steps, lr, loss)
    finally:
        if log_fh:
            log_fh.close()
        if time_fh:
            time_fh.close()
    model.zero_grad()
    return log


def _abort(model, params, last_good, step, checkpoint_path, extra):
    for k, p in params.items():
        p.value = last_good[k]
    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path, extra)
    raise TrainingDivergedError(
        f"non-finite loss or gradient at optimizer step {step + 1}; last good parameters restored",
        step=step + 1, checkpoint_path=checkpoint_path,
    )


def train(model: ToyTransformer, data, cfg: TrainConfig, task_mix=None, out_dir=None, extra=None) -> TrainResult:
    """Fine-tune the experts and routers; everything else stays frozen.

    ``data`` is a :class:`SyntheticWorld` (sampled with ``task_mix``) or a
    list of samples.  With ``out_dir`` set, writes ``metrics.jsonl``,
    ``timings.jsonl`` and ``checkpoint.rode``; ``extra`` is stored in the
    checkpoint header alongside the train config.
    """
    model.freeze_base()
    params = model.trainable_parameters()
    source = SampleSource(data, task_mix)
    paths = {}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"log_path": out / "metrics.jsonl", "timing_path": out / "timings.jsonl",
                 "checkpoint_path": out / "checkpoint.rode"}
    header = {**(extra or {}), "train_config": cfg.to_dict()}
    log = _optimize(model, params, source, cfg, nx.make_rng(cfg.seed), extra=header, **paths)
    ckpt = paths.get("checkpoint_path")
    if ckpt is not None:
        save_checkpoint(model, ckpt, header)
    return TrainResult(model, log, ckpt)


def pretrain_base(model: ToyTransformer, data, steps=300, lr=1e-2, batch_size=16, seed=0, task_mix=None,
                  warmup_iters=20):
    """Surrogate pretraining: fit every frozen weight briefly, then freeze it.

    Adapters are inert meanwhile (B = 0 and excluded from the update).
    """
    params = model.base_parameters()
    for p in model.trainable_parameters().values():
        p.requires_grad = False
    for p in params.values():
        p.requires_grad = True
    cfg = TrainConfig(lr=lr, warmup_iters=min(warmup_iters, steps), batch_size=batch_size, grad_accum=1,
                      total_iters=steps, seed=seed)
    try:
        log = _optimize(model, params, SampleSource(data, task_mix), cfg, nx.make_rng([seed, 1]))
    finally:
        model.freeze_base()
    model.pretrained = True
    return log


def build_pretrained(config: TransformerConfig, world, seed=0, pretrain_steps=300, pretrain_lr=1e-2,
                     task_mix=None) -> ToyTransformer:
    """Build a model whose frozen base is shared across adapter variants with the same seed.

    The base is built and pretrained from ``seed`` alone, so varying the
    strategy or rank list leaves the frozen weights identical.
    """
    base_cfg = TransformerConfig(**{**config.to_dict(), "strategy": "lr", "rank_list": [1]})
    base = build_model(base_cfg, nx.make_rng([seed, 2]))
    if pretrain_steps:
        pretrain_base(base, world, pretrain_steps, pretrain_lr, seed=seed, task_mix=task_mix)
    model = build_model(config, nx.make_rng([seed, 3]))
    return transplant_base(base, model)


def transplant_base(src: ToyTransformer, dst: ToyTransformer) -> ToyTransformer:
    dst_base = dst.base_parameters()
    for name, p in src.base_parameters().items():
        if name not in dst_base or dst_base[name].shape != p.shape:
            raise ConfigurationError(f"base parameter {name!r} does not match between models")
        dst_base[name].value = p.value.copy()
    dst.pretrained = src.pretrained
    dst.freeze_base()
    return dst


# ---------------------------------------------------------------- checkpoints

_MAGIC = b"RODE-CKPT\n"
_FORMAT_VERSION = 1


def save_checkpoint(model: ToyTransformer, path, extra=None):
    """Header (JSON) + little-endian float64 parameter blobs; byte-identical for identical models."""
    params = model.named_parameters()
    entries, blobs, offset = [], [], 0
    for name, p in params.items():
        raw = np.ascontiguousarray(p.value, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(p.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({
        "format_version": _FORMAT_VERSION,
        "model_config": model.config.to_dict(),
        "pretrained": model.pretrained,
        "extra": extra or {},
        "params": entries,
    }, sort_keys=True).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)
    return path


def load_checkpoint(path):
    """Return ``(model, extra)``."""
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(_MAGIC):
        raise DataError(f"{path}: not a rode checkpoint")
    pos = len(_MAGIC)
    (hlen,) = struct.unpack("<Q", data[pos:pos + 8])
    pos += 8
    header = json.loads(data[pos:pos + hlen].decode("utf-8"))
    pos += hlen
    if header.get("format_version") != _FORMAT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
    model = build_model(TransformerConfig(**header["model_config"]), nx.make_rng(0))
    params = model.named_parameters()
    for e in header["params"]:
        if e["name"] not in params:
            raise DataError(f"{path}: unknown parameter {e['name']!r}")
        start = pos + e["offset"]
        arr = np.frombuffer(data[start:start + e["nbytes"]], dtype="<f8").astype(np.float64).reshape(e["shape"])
        if arr.shape != params[e["name"]].shape:
            raise DataError(f"{path}: shape mismatch for {e['name']!r}")
        params[e["name"]].value = arr
    model.pretrained = bool(header.get("pretrained", False))
    model.freeze_base()
    return model, header.get("extra", {})


# ---------------------------------------------------------------- gradient check


@dataclass
class GroupReport:
    name: str
    size: int
    checked: int
    skipped: int
    max_rel_error: float
    max_abs_error: float
    passed: bool


@dataclass
class GradCheckReport:
    tolerance: float
    groups: list[GroupReport]
    frozen_zero: dict[str, bool]

    @property
    def passed(self) -> bool:
        return all(g.passed for g in self.groups) and all(self.frozen_zero.values())

    def failures(self):
        return [g.name for g in self.groups if not g.passed] + [k for k, ok in self.frozen_zero.items() if not ok]

    def summary(self) -> str:
        lines = [f"{'group':40s} {'checked':>8s} {'skipped':>8s} {'max_rel':>10s}  status"]
        for g in self.groups:
            lines.append(f"{g.name:40s} {g.checked:8d} {g.skipped:8d} {g.max_rel_error:10.2e}  "
                         f"{'ok' if g.passed else 'FAIL'}")
        n_frozen = sum(self.frozen_zero.values())
        lines.append(f"frozen parameters with exactly-zero gradient: {n_frozen}/{len(self.frozen_zero)}")
        lines.append("PASS" if self.passed else "FAIL")
        return "\n".join(lines)


def grad_check(model: ToyTransformer, sample, tolerance=1e-3, eps=1e-5, kink=1e-3, floor=1e-6) -> GradCheckReport:
    """Compare analytic gradients with central differences, dropout disabled.

    Router rows whose pre-activation comes within ``kink`` of zero on this
    sample are skipped (ReLU is not differentiable there).  Relative error is
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    model.freeze_base()
    prompt, target = sample.prompt, sample.target

    def loss_value():
        return float(autoregressive_loss(model, prompt, target).value[0, 0])

    model.zero_grad()
    nx.backward(autoregressive_loss(model, prompt, target))
    params = model.trainable_parameters()
    analytic = {k: p.grad.copy() for k, p in params.items()}
    frozen_zero = {k: not np.any(p.grad) for k, p in model.base_parameters().items()}

    skip_rows = {}
    for b, name, layer in model.rode_layers():
        if layer.strategy == "lr" and layer.last_logits is not None:
            near = np.abs(layer.last_logits).min(axis=1) < kink
            skip_rows[f"block{b}.{name}.router"] = near

    groups = []
    for pname, p in params.items():
        skip = np.zeros(p.shape, dtype=bool)
        prefix, _, leaf = pname.rpartition(".")
        if prefix in skip_rows:
            skip[skip_rows[prefix], :] = True
        max_rel = max_abs = 0.0
        checked = 0
        base = p.value
        for idx in np.ndindex(p.shape):
            if skip[idx]:
                continue
            plus = base.copy()
            plus[idx] += eps
            p.value = plus
            fp = loss_value()
            minus = base.copy()
            minus[idx] -= eps
            p.value = minus
            fm = loss_value()
            p.value = base
            num = (fp - fm) / (2 * eps)
            a = analytic[pname][idx]
            err = abs(a - num)
            max_abs = max(max_abs, err)
            max_rel = max(max_rel, err / max(abs(a), abs(num), floor))
            checked += 1
        groups.append(GroupReport(pname, int(p.value.size), checked, int(skip.sum()), max_rel, max_abs,
                                  max_rel <= tolerance))
    model.zero_grad()
    return GradCheckReport(tolerance, groups, frozen_zero)
