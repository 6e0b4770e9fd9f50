"""Task metrics, router traces and heatmap export."""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import ConfigurationError, UndefinedMetricError
from .model import PROJECTIONS, ToyTransformer, forward_batch, greedy_decode_batch
from .tasks import EOS, NUTRITION_FIELDS, TASKS, decode_output


def iou(pred, truth) -> float:
    pred, truth = set(pred), set(truth)
    union = pred | truth
    if not union:
        return 1.0
    return len(pred & truth) / len(union)


def f1(pred, truth) -> float:
    pred, truth = set(pred), set(truth)
    if not pred and not truth:
        return 1.0
    return 2 * len(pred & truth) / (len(pred) + len(truth))


def pmae(preds, truths) -> float:
    """Mean absolute error as a percentage of the mean ground truth."""
    preds = np.asarray(preds, dtype=float)
    truths = np.asarray(truths, dtype=float)
    if preds.shape != truths.shape or preds.ndim != 1 or preds.size == 0:
        raise ValueError(f"pmae needs two equal-length nonempty sequences, got {preds.shape} and {truths.shape}")
    mean_truth = truths.mean()
    if mean_truth == 0:
        raise UndefinedMetricError("pmae is undefined when the ground-truth mean is zero")
    return float(100.0 * np.abs(preds - truths).mean() / mean_truth)


def combined_score(ingredient_iou, pmae_avg) -> float:
    """Single multi-task score: mean of ingredient IoU and (100 - pMAE) / 100."""
    return 0.5 * (ingredient_iou + (100.0 - pmae_avg) / 100.0)


# ---------------------------------------------------------------- traces


@dataclass
class RouterTrace:
    """Gate vectors keyed by (block, projection, token position) for one sample."""

    task_id: str | None = None
    entries: dict = field(default_factory=dict)

    def record(self, block, projection, position, gates):
        self.entries[(int(block), str(projection), int(position))] = np.array(gates, dtype=float)

    def layout(self):
        """Sorted (block, projection, n_experts) triples present in the trace."""
        seen = {}
        for (b, p, _), g in self.entries.items():
            seen[(b, p)] = g.size
        return sorted((b, p, n) for (b, p), n in seen.items())

    def positions(self):
        return sorted({t for (_, _, t) in self.entries})

    def is_complete(self, n_blocks, projections, n_positions) -> bool:
        return len(self.entries) == n_blocks * len(projections) * n_positions

    def gate_values(self) -> np.ndarray:
        if not self.entries:
            return np.zeros(0)
        return np.concatenate([self.entries[k] for k in sorted(self.entries)])

    def sparsity(self, threshold=0.0) -> float:
        g = self.gate_values()
        return float(np.count_nonzero(g <= threshold)) / g.size if g.size else 0.0


def trace_matrix(traces) -> tuple[np.ndarray, list[str]]:
    """Mean gate per (block, projection expert) over every token of every trace.

    Rows are blocks ascending; columns are grouped projection-major,
    expert-minor, projections in query/key/value/output order.
    """
    traces = list(traces)
    if not traces:
        raise ConfigurationError("no traces to reduce")
    layout = traces[0].layout()
    if not layout:
        raise ConfigurationError("trace is empty")
    for t in traces[1:]:
        if t.layout() != layout:
            raise ConfigurationError("traces do not share one block/projection/expert layout")
    blocks = sorted({b for b, _, _ in layout})
    projs = [p for p in PROJECTIONS if any(q == p for _, q, _ in layout)]
    n_exp = {p: n for _, p, n in layout}
    columns = [f"{p}.e{i}" for p in projs for i in range(n_exp[p])]
    offsets = dict(zip(projs, np.cumsum([0] + [n_exp[p] for p in projs])))
    row_of = {b: i for i, b in enumerate(blocks)}
    cells = [[[] for _ in columns] for _ in blocks]
    for t in traces:
        for (b, p, _), g in t.entries.items():
            c = int(offsets[p])
            for k, v in enumerate(g):
                cells[row_of[b]][c + k].append(float(v))
    # correctly rounded sums make each cell independent of token order
    out = np.array([[math.fsum(v) / len(v) if v else 0.0 for v in row] for row in cells])
    return out, columns


def export_heatmap(traces, out_dir, reduce="mean", cell_px=8) -> dict[str, tuple[Path, Path]]:
    """Write one CSV matrix and one binary PGM image per task found in ``traces``."""
    if reduce != "mean":
        raise ConfigurationError(f"only reduce='mean' is supported, got {reduce!r}")
    traces = list(traces)
    if not traces:
        raise ConfigurationError("no traces to export")
    by_task = defaultdict(list)
    for t in traces:
        by_task[t.task_id or "all"].append(t)
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create heatmap directory {out_dir}: {exc}") from exc
    written = {}
    for task in sorted(by_task):
        matrix, columns = trace_matrix(by_task[task])
        csv_path = out_dir / f"heatmap_{task}.csv"
        pgm_path = out_dir / f"heatmap_{task}.pgm"
        lines = [
            f"# task={task}; rows=block ascending; columns=projection-major, expert-minor; value=mean gate",
            ",".join(["block"] + columns),
        ]
        for i, row in enumerate(matrix):
            lines.append(",".join([str(i)] + [repr(float(v)) for v in row]))
        try:
            csv_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
            pgm_path.write_bytes(render_pgm(matrix, cell_px))
        except OSError as exc:
            raise OSError(f"failed writing heatmap to {out_dir}: {exc}") from exc
        written[task] = (csv_path, pgm_path)
    return written


def render_pgm(matrix, cell_px=1) -> bytes:
    """Binary P5 graymap; intensity is linear in value with 0 -> black and the max -> white."""
    m = np.asarray(matrix, dtype=float)
    top = m.max() if m.size else 0.0
    if top > 0:
        pix = np.rint(np.clip(m, 0.0, None) / top * 255.0).astype(np.uint8)
    else:
        pix = np.zeros(m.shape, dtype=np.uint8)
    pix = np.kron(pix, np.ones((cell_px, cell_px), dtype=np.uint8))
    h, w = pix.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes()


def read_heatmap_csv(path) -> tuple[np.ndarray, list[str]]:
    with open(path, encoding="utf-8") as fh:
        rows = [line.rstrip("\n") for line in fh if not line.startswith("#")]
    columns = rows[0].split(",")[1:]
    data = np.array([[float(v) for v in r.split(",")[1:]] for r in rows[1:]])
    return data, columns


# ---------------------------------------------------------------- evaluation


@dataclass
class EvalReport:
    n_samples: int
    ingredient: dict = field(default_factory=dict)
    nutrition: dict = field(default_factory=dict)
    recipe: dict = field(default_factory=dict)
    category: dict = field(default_factory=dict)
    validity: dict = field(default_factory=dict)
    router_sparsity: dict = field(default_factory=dict)
    score: float | None = None

    def to_dict(self):
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _predict(model_or_fn, prompts, max_new_tokens, traces):
    if isinstance(model_or_fn, ToyTransformer):
        budget = [min(max_new_tokens, model_or_fn.config.max_seq_len - len(p)) for p in prompts]
        outs = greedy_decode_batch(model_or_fn, prompts, max(budget), EOS, traces)
        return [o[:b] for o, b in zip(outs, budget)]
    return [list(model_or_fn(p)) for p in prompts]


def score_outputs(samples, outputs, vocab) -> tuple[EvalReport, list[dict]]:
    """Decode outputs, apply each task's metric and return (report, per-sample dump)."""
    dump = []
    per_task = defaultdict(list)
    for s, out in zip(samples, outputs):
        payload, valid = decode_output(vocab, s.task_id, out)
        rec = {"task_id": s.task_id, "prompt": list(s.prompt), "output": [int(t) for t in out], "valid": bool(valid)}
        if s.task_id == "ingredient":
            rec["iou"] = iou(payload, s.ground_truth)
            rec["f1"] = f1(payload, s.ground_truth)
        elif s.task_id == "nutrition":
            rec["pred"] = list(payload.as_tuple())
            rec["truth"] = list(s.ground_truth.as_tuple())
        elif s.task_id == "recipe":
            target = list(s.target)
            got = [int(t) for t in out]
            rec["exact"] = got[: len(target)] == target
            rec["token_acc"] = sum(a == b for a, b in zip(got, target)) / len(target)
        elif s.task_id == "category":
            rec["correct"] = payload == s.ground_truth
        dump.append(rec)
        per_task[s.task_id].append(rec)
    return report_from_dump(dump), dump


def report_from_dump(dump) -> EvalReport:
    per_task = defaultdict(list)
    for rec in dump:
        per_task[rec["task_id"]].append(rec)
    report = EvalReport(n_samples=len(dump))
    report.validity = {t: float(np.mean([r["valid"] for r in rs])) for t, rs in sorted(per_task.items())}
    if per_task["ingredient"]:
        rs = per_task["ingredient"]
        report.ingredient = {"iou": float(np.mean([r["iou"] for r in rs])), "f1": float(np.mean([r["f1"] for r in rs]))}
    if per_task["nutrition"]:
        rs = per_task["nutrition"]
        preds = np.array([r["pred"] for r in rs])
        truths = np.array([r["truth"] for r in rs])
        fields = {f: pmae(preds[:, j], truths[:, j]) for j, f in enumerate(NUTRITION_FIELDS)}
        fields["avg"] = float(np.mean(list(fields.values())))
        report.nutrition = fields
    if per_task["recipe"]:
        rs = per_task["recipe"]
        report.recipe = {"exact_match": float(np.mean([r["exact"] for r in rs])),
                         "token_accuracy": float(np.mean([r["token_acc"] for r in rs]))}
    if per_task["category"]:
        report.category = {"accuracy": float(np.mean([r["correct"] for r in per_task["category"]]))}
    if report.ingredient and report.nutrition:
        report.score = combined_score(report.ingredient["iou"], report.nutrition["avg"])
    return report


def evaluate(model_or_fn, eval_set, vocab, max_new_tokens=None, trace=True, return_dump=False):
    """Greedy-decode every prompt and score it with its task metric.

    ``model_or_fn`` is a :class:`ToyTransformer` or any callable mapping a
    prompt to output tokens (e.g. :class:`rode.tasks.LookupOracle`).
    """
    samples = list(eval_set)
    if not samples:
        raise ConfigurationError("evaluation set is empty")
    if max_new_tokens is None:
        max_new_tokens = max(len(s.target) for s in samples) + 2
    traces = None
    if trace and isinstance(model_or_fn, ToyTransformer):
        traces = [RouterTrace(s.task_id) for s in samples]
    outputs = _predict(model_or_fn, [list(s.prompt) for s in samples], max_new_tokens, traces)
    report, dump = score_outputs(samples, outputs, vocab)
    if traces:
        report.router_sparsity = sparsity_summary(traces)
    return (report, dump) if return_dump else report


def sparsity_summary(traces) -> dict:
    by_task = defaultdict(list)
    for t in traces:
        by_task[t.task_id].append(t.gate_values())
    allv = np.concatenate([np.concatenate(v) for v in by_task.values()])
    out = {"overall": float(np.mean(allv <= 0.0))}
    for task in TASKS:
        if task in by_task:
            out[task] = float(np.mean(np.concatenate(by_task[task]) <= 0.0))
    return out


def write_dump(dump, path):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in dump:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def collect_traces(model: ToyTransformer, samples, chunk=32) -> list[RouterTrace]:
    """Trace gates over each sample's prompt + target (teacher-forced, eval mode)."""
    samples = list(samples)
    traces = [RouterTrace(s.task_id) for s in samples]
    seqs = [(list(s.prompt) + list(s.target))[: model.config.max_seq_len] for s in samples]
    for i in range(0, len(seqs), chunk):
        forward_batch(model, seqs[i:i + chunk], traces=traces[i:i + chunk])
    return traces
