"""Experiment configuration and the variant runner shared by the CLI and the acceptance suite."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from . import numerics as nx
from .adapters import DEFAULT_RANKS
from .exceptions import ConfigurationError
from .layer import trainable_parameter_count
from .metrics import EvalReport, evaluate
from .model import PROJECTIONS, ToyTransformer, TransformerConfig, build_model
from .routing import STRATEGIES
from .tasks import TASKS, SyntheticWorld, generate_world, sample_batch
from .training import TrainConfig, TrainResult, pretrain_base, train, transplant_base

logger = logging.getLogger(__name__)


@dataclass
class WorldSection:
    seed: int = 0
    n_ingredients: int = 10
    n_categories: int = 4
    n_actions: int = 4
    min_ingredients: int = 2
    max_ingredients: int = 3


@dataclass
class ModelSection:
    d_model: int = 16
    n_heads: int = 4
    n_blocks: int = 2
    max_seq_len: int = 48
    adapted_projections: list = field(default_factory=lambda: ["query", "value"])
    alpha: float = 16.0
    dropout_rate: float = 0.05
    ffn_mult: int = 4


@dataclass
class PretrainSection:
    steps: int = 150
    lr: float = 1e-2
    batch_size: int = 16


@dataclass
class TrainSection:
    lr: float = 3e-4
    warmup_iters: int = 100
    weight_decay: float = 0.0
    betas: list = field(default_factory=lambda: [0.9, 0.999])
    eps: float = 1e-8
    batch_size: int = 4
    grad_accum: int = 10
    epochs: int = 1
    total_iters: int = 1000


@dataclass
class EvalSection:
    seed: int = 999
    n_samples: int = 400
    max_new_tokens: int | None = None


@dataclass
class ExperimentConfig:
    seed: int = 0
    strategy: str = "lr"
    rank_list: list = field(default_factory=lambda: list(DEFAULT_RANKS))
    task_mix: list = field(default_factory=lambda: [1.0, 1.0, 1.0, 1.0])
    trace: bool = False
    world: WorldSection = field(default_factory=WorldSection)
    model: ModelSection = field(default_factory=ModelSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:12]

    def model_config(self, vocab_size: int) -> TransformerConfig:
        m = self.model
        return TransformerConfig(
            vocab_size=vocab_size, d_model=m.d_model, n_heads=m.n_heads, n_blocks=m.n_blocks,
            max_seq_len=m.max_seq_len, adapted_projections=tuple(m.adapted_projections),
            rank_list=tuple(self.rank_list), alpha=m.alpha, dropout_rate=m.dropout_rate,
            strategy=self.strategy, ffn_mult=m.ffn_mult,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(**dataclasses.asdict(self.train), seed=self.seed)

    def build_world(self) -> SyntheticWorld:
        return generate_world(**dataclasses.asdict(self.world))

    def validate(self):
        """Check every section before any work starts; messages name the offending field."""
        _check_type("seed", self.seed, int)
        _check_type("trace", self.trace, bool)
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(f"strategy: unknown value {self.strategy!r}; expected one of {STRATEGIES}")
        if not isinstance(self.rank_list, (list, tuple)) or not all(
            isinstance(r, int) and not isinstance(r, bool) for r in self.rank_list
        ):
            raise ConfigurationError(f"rank_list: expected a list of integers, got {self.rank_list!r}")
        if len(self.task_mix) != len(TASKS) or any(w < 0 for w in self.task_mix) or not any(self.task_mix):
            raise ConfigurationError(
                f"task_mix: expected {len(TASKS)} non-negative weights (not all zero) for {TASKS}, got {self.task_mix}"
            )
        bad = [p for p in self.model.adapted_projections if p not in PROJECTIONS]
        if bad:
            raise ConfigurationError(f"model.adapted_projections: unknown projection(s) {bad}")
        if self.pretrain.steps < 0 or self.pretrain.lr <= 0 or self.pretrain.batch_size < 1:
            raise ConfigurationError(f"pretrain: steps >= 0, lr > 0 and batch_size >= 1 required, got {self.pretrain}")
        if self.eval.n_samples < 1:
            raise ConfigurationError(f"eval.n_samples must be >= 1, got {self.eval.n_samples}")
        world = self.build_world()
        cfg = self.model_config(world.vocab.size)
        need = world.max_prompt_length() + world.max_target_length()
        if cfg.max_seq_len < need:
            raise ConfigurationError(f"model.max_seq_len={cfg.max_seq_len} is shorter than the longest sample ({need})")
        self.train_config()
        return self

    def with_overrides(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)


def _check_type(name, value, typ):
    if not isinstance(value, typ) or (typ is int and isinstance(value, bool)):
        raise ConfigurationError(f"{name}: expected {typ.__name__}, got {value!r}")


def _from_mapping(cls, data, where=""):
    if not isinstance(data, dict):
        raise ConfigurationError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigurationError(f"{where or 'config'}: unknown key(s) {unknown}")
    kwargs = {}
    for name, value in data.items():
        default = getattr(cls(), name)
        if dataclasses.is_dataclass(default):
            kwargs[name] = _from_mapping(type(default), value or {}, f"{where}{name}.")
        else:
            kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> ExperimentConfig:
    cfg = _from_mapping(ExperimentConfig, data or {})
    return cfg.validate()


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"{path}: not valid YAML ({exc})") from exc
    return config_from_dict(data or {})


def default_config_yaml() -> str:
    return yaml.safe_dump(ExperimentConfig().to_dict(), sort_keys=False)


# ---------------------------------------------------------------- running variants


@dataclass
class VariantResult:
    label: str
    seed: int
    report: EvalReport
    final_loss: float
    trainable_parameters: int
    model: ToyTransformer = field(repr=False, default=None)
    train_result: TrainResult = field(repr=False, default=None)


class BaseCache:
    """Pretrained frozen bases keyed by everything that shapes them, so variants of one seed share weights."""

    def __init__(self):
        self._bases = {}

    def get(self, cfg: ExperimentConfig, world: SyntheticWorld) -> ToyTransformer:
        key = json.dumps([cfg.seed, dataclasses.asdict(cfg.world), dataclasses.asdict(cfg.model),
                          dataclasses.asdict(cfg.pretrain), list(cfg.task_mix)], sort_keys=True)
        if key not in self._bases:
            base_cfg = TransformerConfig(**{**cfg.model_config(world.vocab.size).to_dict(),
                                            "strategy": "lr", "rank_list": [1]})
            base = build_model(base_cfg, nx.make_rng([cfg.seed, 2]))
            if cfg.pretrain.steps:
                pretrain_base(base, world, cfg.pretrain.steps, cfg.pretrain.lr, cfg.pretrain.batch_size,
                              seed=cfg.seed, task_mix=tuple(cfg.task_mix))
            self._bases[key] = base
        return self._bases[key]


def build_experiment_model(cfg: ExperimentConfig, world=None, cache: BaseCache | None = None) -> ToyTransformer:
    world = world if world is not None else cfg.build_world()
    cache = cache if cache is not None else BaseCache()
    base = cache.get(cfg, world)
    model = build_model(cfg.model_config(world.vocab.size), nx.make_rng([cfg.seed, 3]))
    return transplant_base(base, model)


def eval_set(cfg: ExperimentConfig, world=None):
    world = world if world is not None else cfg.build_world()
    return sample_batch(world, (1.0,) * len(TASKS), cfg.eval.n_samples, nx.make_rng(cfg.eval.seed))


def variant_label(cfg: ExperimentConfig) -> str:
    return f"{cfg.strategy}[{','.join(str(r) for r in cfg.rank_list)}]"


def run_variant(cfg: ExperimentConfig, world=None, cache=None, samples=None, out_dir=None, trace=True,
                keep_model=False) -> VariantResult:
    """Pretrain (or reuse) the base, fine-tune the adapters, and evaluate."""
    world = world if world is not None else cfg.build_world()
    model = build_experiment_model(cfg, world, cache)
    result = train(model, world, cfg.train_config(), task_mix=tuple(cfg.task_mix), out_dir=out_dir)
    samples = samples if samples is not None else eval_set(cfg, world)
    report = evaluate(model, samples, world.vocab, cfg.eval.max_new_tokens, trace=trace)
    tail = [r["loss"] for r in result.log[-50:]]
    n_params = sum(trainable_parameter_count(layer) for _, _, layer in model.rode_layers())
    logger.info("%s seed=%d score=%.4f", variant_label(cfg), cfg.seed, report.score or float("nan"))
    return VariantResult(variant_label(cfg), cfg.seed, report, sum(tail) / len(tail), n_params,
                         model if keep_model else None, result if keep_model else None)


def run_comparison(configs, seeds, progress=None, cache=None, keep_models=False) -> dict[str, list[VariantResult]]:
    """Train every config for every seed; variants of one seed share one pretrained base.

    Returns ``{label: [result per seed]}`` in the order the configs were given.
    """
    results = {variant_label(c): [] for c in configs}
    if len(results) != len(configs):
        raise ConfigurationError("compare: two variants share the same strategy and rank list")
    cache = cache if cache is not None else BaseCache()
    worlds = {}
    for seed in seeds:
        for cfg in configs:
            c = cfg.with_overrides(seed=seed)
            wkey = json.dumps(dataclasses.asdict(c.world), sort_keys=True)
            if wkey not in worlds:
                world = c.build_world()
                worlds[wkey] = (world, eval_set(c, world))
            world, samples = worlds[wkey]
            res = run_variant(c, world, cache, samples, keep_model=keep_models)
            results[variant_label(c)].append(res)
            if progress:
                progress(res)
    return results


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
