"""Command-line entry point: ``rode {train,eval,heatmap,gradcheck,compare,config}``.

Exit codes: 0 success, 1 invalid input or config, 2 runtime failure,
3 an acceptance threshold (``--expect-order``, gradcheck) was not met.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime
import hashlib
import json
import logging
import os
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import numerics as nx
from .exceptions import NumericalError, RodeError, TrainingDivergedError
from .experiment import (
    ExperimentConfig,
    build_experiment_model,
    config_from_dict,
    default_config_yaml,
    eval_set,
    load_config,
    run_comparison,
    variant_label,
    write_json,
)
from .metrics import collect_traces, evaluate, export_heatmap, write_dump
from .model import build_model
from .tasks import TASKS, export_benchmark
from .training import grad_check, load_checkpoint, train

OUTPUT_ROOT_ENV = "RODE_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "rode-runs"

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_THRESHOLD = 0, 1, 2, 3

logger = logging.getLogger("rode")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


class ThresholdFailure(Exception):
    pass


# ---------------------------------------------------------------- helpers


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else config_from_dict({})
    if getattr(args, "seed_override", None) is not None:
        cfg = cfg.with_overrides(seed=args.seed_override).validate()
    if getattr(args, "trace", False):
        cfg = cfg.with_overrides(trace=True)
    return cfg


def _run_dir(args, kind, digest) -> Path:
    if args.out:
        out = Path(args.out)
    else:
        root = Path(os.environ.get(OUTPUT_ROOT_ENV, DEFAULT_OUTPUT_ROOT))
        out = root / f"{kind}-{digest}"
    out.mkdir(parents=True, exist_ok=True)
    return out


def _file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _manifest(out, command, cfg: ExperimentConfig | None, **extra):
    write_json(out / "manifest.json", {
        "command": command,
        "config": cfg.to_dict() if cfg else None,
        "config_hash": cfg.config_hash() if cfg else None,
        "seed": cfg.seed if cfg else None,
        "created": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "versions": {"rode": __version__, "python": platform.python_version(), "numpy": np.__version__},
        **extra,
    })


def _checkpoint_config(extra) -> ExperimentConfig | None:
    data = extra.get("experiment")
    return config_from_dict(data) if data else None


# ---------------------------------------------------------------- commands


def cmd_train(args) -> int:
    cfg = _load(args)
    out = _run_dir(args, "train", cfg.config_hash())
    world = cfg.build_world()
    model = build_experiment_model(cfg, world)
    _manifest(out, "train", cfg)
    result = train(model, world, cfg.train_config(), task_mix=tuple(cfg.task_mix), out_dir=out,
                   extra={"experiment": cfg.to_dict()})
    if cfg.trace:
        samples = eval_set(cfg, world)
        export_heatmap(collect_traces(model, samples), out / "heatmaps")
    print(f"trained {variant_label(cfg)} seed={cfg.seed}: final loss {result.log[-1]['loss']:.4f}")
    print(f"artifacts: {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, extra = load_checkpoint(args.checkpoint)
    cfg = load_config(args.config) if args.config else _checkpoint_config(extra) or config_from_dict({})
    if args.seed_override is not None:
        cfg = cfg.with_overrides(eval=dataclasses.replace(cfg.eval, seed=args.seed_override)).validate()
    out = _run_dir(args, "eval", hashlib.sha256(
        (_file_digest(args.checkpoint) + cfg.config_hash()).encode()).hexdigest()[:12])
    world = cfg.build_world()
    if world.vocab.size != model.config.vocab_size:
        raise RodeError(f"checkpoint vocab size {model.config.vocab_size} does not match the configured world "
                        f"({world.vocab.size})")
    samples = eval_set(cfg, world)
    report, dump = evaluate(model, samples, world.vocab, cfg.eval.max_new_tokens, trace=True, return_dump=True)
    (out / "eval_report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    write_dump(dump, out / "eval_dump.jsonl")
    export_benchmark(samples, out / "eval_set.jsonl")
    if args.trace or cfg.trace:
        export_heatmap(collect_traces(model, samples), out / "heatmaps")
    _manifest(out, "eval", cfg, checkpoint=str(args.checkpoint))
    print(report.to_json())
    return EXIT_OK


def cmd_heatmap(args) -> int:
    model, extra = load_checkpoint(args.checkpoint)
    cfg = load_config(args.config) if args.config else _checkpoint_config(extra) or config_from_dict({})
    tasks = TASKS if args.task == "all" else (args.task,)
    world = cfg.build_world()
    samples = [s for s in eval_set(cfg, world) if s.task_id in tasks]
    out = _run_dir(args, "heatmap", hashlib.sha256(
        (_file_digest(args.checkpoint) + cfg.config_hash() + args.task).encode()).hexdigest()[:12])
    files = export_heatmap(collect_traces(model, samples), out)
    for task, (csv_path, pgm_path) in files.items():
        print(f"{task}: {csv_path} {pgm_path}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _load(args)
    world = cfg.build_world()
    model = build_model(cfg.model_config(world.vocab.size), nx.make_rng([cfg.seed, 3]))
    if args.perturb:
        rng = nx.make_rng([cfg.seed, 4])
        for _, _, layer in model.rode_layers():
            for e in layer.experts:
                e.b_up.value = rng.normal(0.0, args.perturb, size=e.b_up.shape)
    sample = eval_set(cfg.with_overrides(eval=dataclasses.replace(cfg.eval, n_samples=1)), world)[0]
    report = grad_check(model, sample, tolerance=args.tolerance)
    print(report.summary())
    if not report.passed:
        raise ThresholdFailure(f"gradient check failed for: {', '.join(report.failures())}")
    return EXIT_OK


def _parse_rank_sets(text):
    sets = []
    for chunk in text.split(";"):
        chunk = chunk.strip()
        if chunk:
            try:
                sets.append([int(r) for r in chunk.split(",")])
            except ValueError as exc:
                raise RodeError(f"--rank-sets: cannot parse {chunk!r} as integers") from exc
    return sets


def _format_table(results, seeds) -> str:
    head = ["variant", "params"] + [f"seed{s}" for s in seeds] + ["mean", "iou", "pmae", "sparsity", "loss"]
    rows = [head]
    for label, rs in results.items():
        scores = [r.report.score for r in rs]
        rows.append([
            label, str(rs[0].trainable_parameters), *[f"{s:.4f}" for s in scores], f"{np.mean(scores):.4f}",
            f"{np.mean([r.report.ingredient['iou'] for r in rs]):.4f}",
            f"{np.mean([r.report.nutrition['avg'] for r in rs]):.2f}",
            f"{np.mean([r.report.router_sparsity.get('overall', 0.0) for r in rs]):.3f}",
            f"{np.mean([r.final_loss for r in rs]):.4f}",
        ])
    widths = [max(len(r[i]) for r in rows) for i in range(len(head))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in rows)


def check_order(means: dict[str, float], order: list[str]) -> list[str]:
    """Violations of ``means[order[0]] >= means[order[1]] >= ...``; the first-vs-last gap must be strictly positive."""
    missing = [k for k in order if k not in means]
    if missing:
        raise RodeError(f"--expect-order names unknown variant(s) {missing}; known: {sorted(means)}")
    bad = [f"{a} ({means[a]:.4f}) < {b} ({means[b]:.4f})" for a, b in zip(order, order[1:]) if means[a] < means[b]]
    if len(order) > 1 and not means[order[0]] > means[order[-1]]:
        bad.append(f"{order[0]} ({means[order[0]]:.4f}) is not strictly above {order[-1]} ({means[order[-1]]:.4f})")
    return bad


def cmd_compare(args) -> int:
    bases = [load_config(p) for p in args.config] if args.config else [config_from_dict({})]
    strategies = args.strategies.split(",") if args.strategies else None
    rank_sets = _parse_rank_sets(args.rank_sets) if args.rank_sets else None
    configs = []
    for base in bases:
        for strat in strategies or [base.strategy]:
            for ranks in rank_sets or [base.rank_list]:
                configs.append(base.with_overrides(strategy=strat, rank_list=list(ranks)).validate())
    seeds = args.seeds if args.seeds else [args.seed_override if args.seed_override is not None else bases[0].seed]
    digest = hashlib.sha256(json.dumps([[c.to_dict() for c in configs], seeds], sort_keys=True).encode()).hexdigest()[:12]
    out = _run_dir(args, "compare", digest)

    def progress(r):
        print(f"  {r.label:24s} seed={r.seed} score={r.report.score:.4f}", file=sys.stderr, flush=True)

    results = run_comparison(configs, seeds, progress)
    table = _format_table(results, seeds)
    print(table)
    (out / "compare.txt").write_text(table + "\n", encoding="utf-8")
    summary = {
        label: {
            "trainable_parameters": rs[0].trainable_parameters,
            "scores": [r.report.score for r in rs],
            "mean_score": float(np.mean([r.report.score for r in rs])),
            "reports": [r.report.to_dict() for r in rs],
        }
        for label, rs in results.items()
    }
    write_json(out / "compare.json", {"seeds": seeds, "variants": summary})
    _manifest(out, "compare", None, variants=[c.to_dict() for c in configs], seeds=seeds)
    if args.expect_order:
        order = [s.strip() for s in args.expect_order.split(">=")]
        bad = check_order({k: v["mean_score"] for k, v in summary.items()}, order)
        if bad:
            per_seed = "; ".join(f"{k}: {[round(s, 4) for s in v['scores']]}" for k, v in summary.items())
            raise ThresholdFailure("expected order violated: " + "; ".join(bad) + f" (per seed: {per_seed})")
        print(f"order holds: {' >= '.join(order)}")
    return EXIT_OK


def cmd_config(args) -> int:
    text = default_config_yaml()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        print(text, end="")
    return EXIT_OK


# ---------------------------------------------------------------- wiring


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rode", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config=True, checkpoint=False):
        if config:
            sp.add_argument("--config", help="YAML experiment config (defaults are used when omitted)")
        if checkpoint:
            sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--out", help=f"output directory (default: ${OUTPUT_ROOT_ENV}/<kind>-<hash>)")
        sp.add_argument("--seed-override", type=int)
        sp.add_argument("--trace", action="store_true", help="also export router heatmaps")

    sp = sub.add_parser("train", help="fine-tune the adapters and write checkpoint, metrics and manifest")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on the synthetic benchmark")
    common(sp, checkpoint=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("heatmap", help="export per-task router heatmaps from a checkpoint")
    common(sp, checkpoint=True)
    sp.add_argument("--task", default="all", choices=("all",) + TASKS)
    sp.set_defaults(func=cmd_heatmap)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every trainable gradient")
    common(sp)
    sp.add_argument("--tolerance", type=float, default=1e-3)
    sp.add_argument("--perturb", type=float, default=0.3,
                    help="std of random B values so A and router gradients are nonzero (0 keeps B=0)")
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("compare", help="train several variants over several seeds and tabulate")
    sp.add_argument("--config", action="append", help="repeatable; each config is one variant family")
    sp.add_argument("--strategies", help="comma list, e.g. lr,softmax,top1")
    sp.add_argument("--rank-sets", help="semicolon list, e.g. '8,8,8,8;2,4,6,8'")
    sp.add_argument("--seeds", type=int, nargs="+")
    sp.add_argument("--expect-order", help="e.g. 'lr[8,8,8,8] >= softmax[8,8,8,8]'; exit 3 if violated")
    sp.add_argument("--out")
    sp.add_argument("--seed-override", type=int)
    sp.add_argument("--trace", action="store_true")
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("config", help="print the default config with every field filled in")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_config)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ThresholdFailure as exc:
        print(f"rode: threshold not met: {exc}", file=sys.stderr)
        return EXIT_THRESHOLD
    except (TrainingDivergedError, NumericalError) as exc:
        print(f"rode: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (RodeError, ValueError, TypeError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"rode: invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (OSError, ArithmeticError) as exc:
        print(f"rode: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
