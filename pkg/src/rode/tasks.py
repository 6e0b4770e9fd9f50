"""Synthetic multi-task food benchmark.

A :class:`SyntheticWorld` plants shared latent structure: each dish is a
category plus an ingredient set drawn from that category's preferred
ingredients; every ingredient has a fixed nutrition row and a fixed cooking
action.  A prompt shows the dish as "visual" tokens (one per ingredient plus a
plating-style token for the category), and four tasks read different answers
off the same dish:

* ``ingredient``: the ingredient set, ascending.
* ``recipe``: ``action(i) ingredient(i)`` for each ingredient, ascending.
* ``nutrition``: the summed nutrition record as fixed-point digit tokens.
* ``category``: the category token.

Every target ends with the EOS token.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

from .exceptions import ConfigurationError, DataError
from .numerics import make_rng

TASKS = ("ingredient", "recipe", "nutrition", "category")
NUTRITION_FIELDS = ("mass", "energy", "fat", "protein", "carb")

EOS, SEP, DOT, FIELD_SEP = 0, 1, 2, 3
_TAG_BASE = 4
_DIGIT_BASE = _TAG_BASE + len(TASKS)
_N_SPECIAL = _DIGIT_BASE + 10


@dataclass(frozen=True)
class NutritionRecord:
    mass: float = 0.0
    energy: float = 0.0
    fat: float = 0.0
    protein: float = 0.0
    carb: float = 0.0

    def as_tuple(self) -> tuple[float, ...]:
        return tuple(getattr(self, f) for f in NUTRITION_FIELDS)

    def validate(self):
        for name in NUTRITION_FIELDS:
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise DataError(f"nutrition field {name!r} must be finite and >= 0, got {v}")
        return self

    def rounded(self, ndigits=1) -> "NutritionRecord":
        return NutritionRecord(*(round(v, ndigits) for v in self.as_tuple()))


def aggregate_nutrition(ingredients) -> NutritionRecord:
    """Dish nutrition as the elementwise sum of ingredient records."""
    totals = [0.0] * len(NUTRITION_FIELDS)
    for rec in ingredients:
        rec.validate()
        for j, v in enumerate(rec.as_tuple()):
            totals[j] += v
    return NutritionRecord(*totals)


@dataclass(frozen=True)
class Vocabulary:
    n_ingredients: int
    n_categories: int
    n_actions: int

    @property
    def ingredient_base(self):
        return _N_SPECIAL

    @property
    def visual_base(self):
        return self.ingredient_base + self.n_ingredients

    @property
    def style_base(self):
        return self.visual_base + self.n_ingredients

    @property
    def category_base(self):
        return self.style_base + self.n_categories

    @property
    def action_base(self):
        return self.category_base + self.n_categories

    @property
    def size(self):
        return self.action_base + self.n_actions

    def tag(self, task_id):
        return _TAG_BASE + TASKS.index(task_id)

    def task_of_tag(self, token):
        k = token - _TAG_BASE
        return TASKS[k] if 0 <= k < len(TASKS) else None

    @staticmethod
    def digit(d):
        return _DIGIT_BASE + d

    @staticmethod
    def digit_value(token):
        k = token - _DIGIT_BASE
        return k if 0 <= k < 10 else None

    def ingredient(self, i):
        return self.ingredient_base + i

    def ingredient_of(self, token):
        k = token - self.ingredient_base
        return k if 0 <= k < self.n_ingredients else None

    def visual(self, i):
        return self.visual_base + i

    def visual_of(self, token):
        k = token - self.visual_base
        return k if 0 <= k < self.n_ingredients else None

    def style(self, c):
        return self.style_base + c

    def style_of(self, token):
        k = token - self.style_base
        return k if 0 <= k < self.n_categories else None

    def category(self, c):
        return self.category_base + c

    def category_of(self, token):
        k = token - self.category_base
        return k if 0 <= k < self.n_categories else None

    def action(self, a):
        return self.action_base + a

    def action_of(self, token):
        k = token - self.action_base
        return k if 0 <= k < self.n_actions else None


@dataclass(frozen=True)
class Dish:
    category: int
    ingredients: tuple[int, ...]  # ascending


@dataclass(frozen=True)
class TaskSample:
    task_id: str
    prompt: tuple[int, ...]
    target: tuple[int, ...]
    ground_truth: Any


@dataclass(eq=False)
class SyntheticWorld:
    seed: int
    n_ingredients: int
    n_categories: int
    n_actions: int
    min_ingredients: int
    max_ingredients: int
    nutrition_table: list[NutritionRecord]
    actions: tuple[int, ...]  # cooking action per ingredient
    category_weights: np.ndarray  # (n_categories, n_ingredients), rows sum to 1
    preferred: tuple[tuple[int, ...], ...]
    vocab: Vocabulary = field(init=False)

    def __post_init__(self):
        self.vocab = Vocabulary(self.n_ingredients, self.n_categories, self.n_actions)

    def sample_dish(self, rng) -> Dish:
        c = int(rng.integers(self.n_categories))
        k = int(rng.integers(self.min_ingredients, self.max_ingredients + 1))
        chosen = rng.choice(self.n_ingredients, size=k, replace=False, p=self.category_weights[c])
        return Dish(c, tuple(sorted(int(i) for i in chosen)))

    def dish_nutrition(self, ingredients) -> NutritionRecord:
        return aggregate_nutrition(self.nutrition_table[i] for i in ingredients).rounded(1)

    def recipe(self, ingredients) -> tuple[int, ...]:
        v = self.vocab
        out = []
        for i in sorted(ingredients):
            out += [v.action(self.actions[i]), v.ingredient(i)]
        return tuple(out)

    def answer(self, task_id, dish: Dish):
        if task_id == "ingredient":
            return frozenset(dish.ingredients)
        if task_id == "recipe":
            return self.recipe(dish.ingredients)
        if task_id == "nutrition":
            return self.dish_nutrition(dish.ingredients)
        if task_id == "category":
            return dish.category
        raise ConfigurationError(f"unknown task {task_id!r}")

    def prompt(self, task_id, dish: Dish, rng) -> tuple[int, ...]:
        v = self.vocab
        shown = [v.visual(int(i)) for i in rng.permutation(list(dish.ingredients))]
        return (v.tag(task_id), v.style(dish.category), *shown, SEP)

    def make_sample(self, task_id, dish: Dish, rng) -> TaskSample:
        truth = self.answer(task_id, dish)
        return TaskSample(task_id, self.prompt(task_id, dish, rng), encode_target(self.vocab, task_id, truth), truth)

    def dish_from_prompt(self, prompt) -> Dish | None:
        v = self.vocab
        if len(prompt) < 3:
            return None
        c = v.style_of(prompt[1])
        ings = [v.visual_of(t) for t in prompt[2:-1]]
        if c is None or any(i is None for i in ings):
            return None
        return Dish(c, tuple(sorted(ings)))

    def max_target_length(self) -> int:
        nutrition = len(NUTRITION_FIELDS) * (NUMBER_WIDTH + 3)
        return max(2 * self.max_ingredients + 1, nutrition, self.max_ingredients + 1)

    def max_prompt_length(self) -> int:
        return self.max_ingredients + 3


def generate_world(seed, n_ingredients=12, n_categories=4, n_actions=4,
                   min_ingredients=2, max_ingredients=3) -> SyntheticWorld:
    if n_ingredients < 4 or n_categories < 2:
        raise ConfigurationError(
            f"need n_ingredients >= 4 and n_categories >= 2, got {n_ingredients}, {n_categories}"
        )
    if not 1 <= min_ingredients <= max_ingredients <= n_ingredients:
        raise ConfigurationError("need 1 <= min_ingredients <= max_ingredients <= n_ingredients")
    if n_actions < 1:
        raise ConfigurationError("need at least one cooking action")
    rng = make_rng(seed)
    table = []
    for _ in range(n_ingredients):
        mass = float(rng.integers(5, 50))
        fat, protein, carb = (rng.dirichlet([1.0, 1.0, 1.0, 2.0]) * 0.6 * mass)[:3]
        energy = 9 * fat + 4 * protein + 4 * carb
        table.append(NutritionRecord(mass, energy, fat, protein, carb).rounded(1))
    actions = tuple(int(a) for a in rng.integers(n_actions, size=n_ingredients))

    perm = rng.permutation(n_ingredients)
    per = max(max_ingredients, n_ingredients // n_categories)
    weights = np.full((n_categories, n_ingredients), 0.1)
    preferred = []
    for c in range(n_categories):
        idx = [int(perm[(c * per + j) % n_ingredients]) for j in range(per)]
        weights[c, idx] = 3.0
        preferred.append(tuple(sorted(idx)))
    weights /= weights.sum(axis=1, keepdims=True)
    return SyntheticWorld(
        seed=seed, n_ingredients=n_ingredients, n_categories=n_categories, n_actions=n_actions,
        min_ingredients=min_ingredients, max_ingredients=max_ingredients,
        nutrition_table=table, actions=actions, category_weights=weights, preferred=tuple(preferred),
    )


def sample_batch(world: SyntheticWorld, task_mix, batch_size, rng) -> list[TaskSample]:
    """Draw ``batch_size`` samples, choosing each task in proportion to ``task_mix``."""
    p = _normalize_mix(task_mix)
    out = []
    for _ in range(batch_size):
        task = TASKS[int(rng.choice(len(TASKS), p=p))]
        out.append(world.make_sample(task, world.sample_dish(rng), rng))
    return out


def _normalize_mix(task_mix) -> np.ndarray:
    if isinstance(task_mix, dict):
        task_mix = [task_mix.get(t, 0.0) for t in TASKS]
    w = np.asarray(task_mix, dtype=float)
    if w.shape != (len(TASKS),) or (w < 0).any() or w.sum() <= 0 or not np.isfinite(w).all():
        raise ConfigurationError(f"task mix needs {len(TASKS)} nonnegative weights, not all zero; got {task_mix}")
    return w / w.sum()


# ---------------------------------------------------------------- codecs


NUMBER_WIDTH = 3  # integer digits; values are zero-padded, e.g. 20.5 -> "020.5"
MAX_NUTRITION_VALUE = 10**NUMBER_WIDTH - 0.1


def _encode_number(v: float) -> list[int]:
    if round(v, 1) > MAX_NUTRITION_VALUE:
        raise DataError(f"nutrition value {v} exceeds the codec maximum {MAX_NUTRITION_VALUE}")
    text = f"{v:0{NUMBER_WIDTH + 2}.1f}"
    return [DOT if ch == "." else Vocabulary.digit(int(ch)) for ch in text]


def _decode_number(tokens) -> tuple[float | None, bool]:
    """Parse a digit chunk; returns (value or None, exactly canonical width)."""
    text = []
    for t in tokens:
        d = Vocabulary.digit_value(t)
        if d is not None:
            text.append(str(d))
        elif t == DOT:
            text.append(".")
        else:
            return None, False
    s = "".join(text)
    if not s or s.count(".") > 1 or s.startswith(".") or s.endswith("."):
        return None, False
    whole = s.split(".")[0]
    if len(whole) > NUMBER_WIDTH:
        return None, False
    canonical = len(whole) == NUMBER_WIDTH and "." in s and len(s.split(".")[1]) == 1
    return float(s), canonical


def encode_target(vocab: Vocabulary, task_id, payload) -> tuple[int, ...]:
    if task_id == "ingredient":
        return tuple(vocab.ingredient(i) for i in sorted(payload)) + (EOS,)
    if task_id == "recipe":
        return tuple(payload) + (EOS,)
    if task_id == "nutrition":
        payload.validate()
        out = []
        for j, v in enumerate(payload.as_tuple()):
            if j:
                out.append(FIELD_SEP)
            out += _encode_number(v)
        return tuple(out) + (EOS,)
    if task_id == "category":
        return (vocab.category(payload), EOS)
    raise ConfigurationError(f"unknown task {task_id!r}")


def decode_output(vocab: Vocabulary, task_id, tokens):
    """Return ``(payload, valid)``; malformed output yields a best-effort payload."""
    tokens = [int(t) for t in tokens]
    terminated = EOS in tokens
    body = tokens[: tokens.index(EOS)] if terminated else tokens

    if task_id == "ingredient":
        ids = [vocab.ingredient_of(t) for t in body]
        found = [i for i in ids if i is not None]
        valid = terminated and None not in ids and all(a < b for a, b in zip(found, found[1:]))
        return frozenset(found), valid
    if task_id == "recipe":
        ok = len(body) % 2 == 0 and all(
            vocab.action_of(a) is not None and vocab.ingredient_of(i) is not None
            for a, i in zip(body[::2], body[1::2])
        )
        return tuple(body), terminated and ok
    if task_id == "nutrition":
        chunks, cur = [], []
        for t in body:
            if t == FIELD_SEP:
                chunks.append(cur)
                cur = []
            else:
                cur.append(t)
        chunks.append(cur)
        parsed = [_decode_number(c) for c in chunks[: len(NUTRITION_FIELDS)]]
        valid = terminated and len(chunks) == len(NUTRITION_FIELDS) and all(ok for _, ok in parsed)
        values = [v if v is not None else 0.0 for v, _ in parsed]
        values += [0.0] * (len(NUTRITION_FIELDS) - len(values))
        return NutritionRecord(*values), valid
    if task_id == "category":
        c = vocab.category_of(body[0]) if body else None
        return (c if c is not None else -1), terminated and len(body) == 1 and c is not None
    raise ConfigurationError(f"unknown task {task_id!r}")


class LookupOracle:
    """Answers any well-formed prompt by reading the dish back and consulting the world."""

    def __init__(self, world: SyntheticWorld):
        self.world = world

    def __call__(self, prompt) -> tuple[int, ...]:
        task = self.world.vocab.task_of_tag(prompt[0])
        dish = self.world.dish_from_prompt(prompt)
        if task is None or dish is None:
            return (EOS,)
        return encode_target(self.world.vocab, task, self.world.answer(task, dish))


# ---------------------------------------------------------------- export


def _truth_to_json(task_id, truth):
    if task_id == "ingredient":
        return sorted(truth)
    if task_id == "recipe":
        return list(truth)
    if task_id == "nutrition":
        return asdict(truth)
    return int(truth)


def _truth_from_json(task_id, obj):
    if task_id == "ingredient":
        return frozenset(int(i) for i in obj)
    if task_id == "recipe":
        return tuple(int(t) for t in obj)
    if task_id == "nutrition":
        return NutritionRecord(**{k: float(obj[k]) for k in NUTRITION_FIELDS})
    return int(obj)


def sample_to_json(sample: TaskSample) -> str:
    return json.dumps({
        "task_id": sample.task_id,
        "prompt": list(sample.prompt),
        "target": list(sample.target),
        "ground_truth": _truth_to_json(sample.task_id, sample.ground_truth),
    }, sort_keys=True)


def sample_from_json(line: str) -> TaskSample:
    obj = json.loads(line)
    task = obj["task_id"]
    if task not in TASKS:
        raise DataError(f"unknown task {task!r}")
    return TaskSample(task, tuple(obj["prompt"]), tuple(obj["target"]), _truth_from_json(task, obj["ground_truth"]))


def export_benchmark(samples, path):
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(sample_to_json(s) + "\n")


def import_benchmark(path) -> list[TaskSample]:
    with open(path, encoding="utf-8") as fh:
        return [sample_from_json(line) for line in fh if line.strip()]
