import json

import numpy as np
import pytest

import rode.numerics
from rode import numerics as nx
from rode.exceptions import ConfigurationError, DataError, TrainingDivergedError, UsageError
from rode.model import TransformerConfig, batch_loss, build_model, forward_logits
from rode.tasks import TaskSample, generate_world, sample_batch
from rode.training import (
    OptimizerState,
    TrainConfig,
    accumulate_gradients,
    adamw_step,
    build_pretrained,
    grad_check,
    load_checkpoint,
    lr_at,
    save_checkpoint,
    train,
)

from conftest import randomize_adapters


# ---------------------------------------------------------------- schedule


def test_schedule_anchor_points():
    cfg = TrainConfig()
    assert lr_at(cfg, 0) == 0.0
    assert lr_at(cfg, 100) == 3e-4
    assert lr_at(cfg, 1000) == 0.0
    assert lr_at(cfg, 50) == pytest.approx(1.5e-4, rel=1e-15)
    assert lr_at(cfg, 550) == pytest.approx(1.5e-4, rel=1e-15)


def test_schedule_is_piecewise_linear_and_continuous():
    cfg = TrainConfig(lr=1.0, warmup_iters=10, total_iters=30)
    values = [lr_at(cfg, s) for s in range(31)]
    assert max(values) == 1.0 == values[10]
    steps = np.diff(values)
    np.testing.assert_allclose(steps[:10], 0.1, rtol=1e-12)
    np.testing.assert_allclose(steps[10:], -0.05, rtol=1e-12)
    assert lr_at(TrainConfig(lr=2.0, warmup_iters=0, total_iters=4), 0) == 2.0


def test_schedule_rejects_out_of_range_steps():
    cfg = TrainConfig(total_iters=10, warmup_iters=2)
    for step in (-1, 11):
        with pytest.raises(UsageError):
            lr_at(cfg, step)


def test_config_invariants():
    with pytest.raises(ConfigurationError):
        TrainConfig(lr=0.0)
    with pytest.raises(ConfigurationError):
        TrainConfig(warmup_iters=20, total_iters=10)
    with pytest.raises(ConfigurationError):
        TrainConfig(grad_accum=0)


# ---------------------------------------------------------------- AdamW


def _scalar(v):
    return {"p": nx.parameter([[v]])}


def test_adamw_hand_step():
    # m = 0.1, v = 0.001 after one step; bias correction restores g and g^2
    params, state = _scalar(1.0), OptimizerState()
    adamw_step(params, {"p": np.array([[1.0]])}, state, lr=0.01)
    assert params["p"].value[0, 0] == pytest.approx(1.0 - 0.01 / (1.0 + 1e-8), rel=1e-14)
    assert state.step == 1
    np.testing.assert_allclose(state.first_moment["p"], [[0.1]], rtol=1e-15)
    np.testing.assert_allclose(state.second_moment["p"], [[0.001]], rtol=1e-12)


def test_adamw_second_step_matches_recurrence():
    params, state = _scalar(0.5), OptimizerState()
    g1, g2, lr, b1, b2, eps = 0.3, -0.7, 0.05, 0.9, 0.999, 1e-8
    adamw_step(params, {"p": np.array([[g1]])}, state, lr)
    adamw_step(params, {"p": np.array([[g2]])}, state, lr)
    p = 0.5
    m = v = 0.0
    for t, g in enumerate((g1, g2), start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p -= lr * (m / (1 - b1**t)) / ((v / (1 - b2**t)) ** 0.5 + eps)
    assert params["p"].value[0, 0] == pytest.approx(p, rel=1e-13)


def test_adamw_decoupled_weight_decay():
    params = _scalar(2.0)
    adamw_step(params, {"p": np.zeros((1, 1))}, OptimizerState(), lr=0.1, weight_decay=0.5)
    assert params["p"].value[0, 0] == pytest.approx(2.0 * (1 - 0.05), rel=1e-15)


def test_adamw_zero_gradient_or_zero_lr_leaves_parameters():
    rng = nx.make_rng(0)
    params = {"a": nx.parameter(rng.normal(size=(3, 2)))}
    before = params["a"].value.copy()
    adamw_step(params, {"a": np.zeros((3, 2))}, OptimizerState(), lr=0.1)
    np.testing.assert_array_equal(params["a"].value, before)
    adamw_step(params, {"a": rng.normal(size=(3, 2))}, OptimizerState(), lr=0.0)
    np.testing.assert_array_equal(params["a"].value, before)


def test_adamw_rejects_bad_gradients():
    params = _scalar(1.0)
    with pytest.raises(TrainingDivergedError, match="'p'"):
        adamw_step(params, {"p": np.array([[np.nan]])}, OptimizerState(), lr=0.1)
    with pytest.raises(DataError):
        adamw_step(params, {"p": np.zeros((2, 1))}, OptimizerState(), lr=0.1)


# ---------------------------------------------------------------- accumulation


def _fixed_length_batches(n_batches, batch_size, seed):
    rng = nx.make_rng(seed)
    return [
        [TaskSample("ingredient", rng.integers(0, 40, size=5).tolist(), tuple(rng.integers(0, 40, size=3).tolist()), None)
         for _ in range(batch_size)]
        for _ in range(n_batches)
    ]


def _grads(model):
    return {k: p.grad.copy() for k, p in model.trainable_parameters().items()}


def test_accumulation_equals_concatenated_batch(toy_model):
    randomize_adapters(toy_model, nx.make_rng(1))
    toy_model.freeze_base()
    micro = _fixed_length_batches(4, 3, seed=2)

    toy_model.zero_grad()
    accumulate_gradients(toy_model, micro)
    acc = _grads(toy_model)

    # equal target counts per micro-batch make the token mean of the union equal the mean of means
    toy_model.zero_grad()
    union = [(s.prompt, s.target) for batch in micro for s in batch]
    nx.backward(batch_loss(toy_model, union))
    joint = _grads(toy_model)
    for name in acc:
        np.testing.assert_allclose(acc[name], joint[name], rtol=0, atol=1e-10, err_msg=name)


def test_accumulation_mean_of_means_with_ragged_batches(toy_model, world):
    randomize_adapters(toy_model, nx.make_rng(3))
    toy_model.freeze_base()
    micro = [sample_batch(world, (1, 1, 1, 1), 3, nx.make_rng(k)) for k in range(3)]

    toy_model.zero_grad()
    loss, _ = accumulate_gradients(toy_model, micro)
    acc = _grads(toy_model)

    toy_model.zero_grad()
    losses = [batch_loss(toy_model, [(s.prompt, s.target) for s in b]) for b in micro]
    total = nx.scale(nx.add(nx.add(losses[0], losses[1]), losses[2]), 1 / 3)
    nx.backward(total)
    assert loss == pytest.approx(total.value[0, 0], rel=1e-13)
    for name, g in _grads(toy_model).items():
        np.testing.assert_allclose(acc[name], g, rtol=0, atol=1e-10, err_msg=name)


# ---------------------------------------------------------------- training loop


def _small(world, d=16, seed=0, **kw):
    cfg = TransformerConfig(vocab_size=world.vocab.size, d_model=d, rank_list=(2, 4), **kw)
    return build_model(cfg, nx.make_rng(seed))


def test_training_is_deterministic(world, tmp_path):
    cfg = TrainConfig(lr=3e-3, warmup_iters=3, total_iters=12, grad_accum=2, seed=5)
    r1 = train(_small(world), world, cfg, out_dir=tmp_path / "a")
    r2 = train(_small(world), world, cfg, out_dir=tmp_path / "b")
    assert [x["loss"] for x in r1.log] == [x["loss"] for x in r2.log]
    for name in ("metrics.jsonl", "checkpoint.rode"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    rows = [json.loads(line) for line in (tmp_path / "a" / "metrics.jsonl").read_text().splitlines()]
    assert [r["step"] for r in rows] == list(range(1, 13))
    assert set(rows[0]) == {"step", "lr", "loss", "task_loss"}
    timing = [json.loads(line) for line in (tmp_path / "a" / "timings.jsonl").read_text().splitlines()]
    assert len(timing) == 12 and all(t["wall_time"] >= 0 for t in timing)


def test_training_touches_only_adapters(world):
    model = _small(world)
    before = {k: p.value.copy() for k, p in model.base_parameters().items()}
    train(model, world, TrainConfig(lr=1e-2, warmup_iters=2, total_iters=10, grad_accum=1))
    for k, p in model.base_parameters().items():
        assert p.value.tobytes() == before[k].tobytes(), k
    assert any(e.b_up.value.any() for _, _, layer in model.rode_layers() for e in layer.experts)


def test_training_on_fixed_sample_list(world):
    samples = sample_batch(world, (1, 0, 0, 1), 8, nx.make_rng(0))
    r = train(_small(world), samples, TrainConfig(lr=1e-2, warmup_iters=0, total_iters=5, grad_accum=1))
    assert len(r.log) == 5
    with pytest.raises(ConfigurationError):
        train(_small(world), [], TrainConfig(total_iters=1, warmup_iters=0))


def test_epochs_multiply_optimizer_steps(world):
    r = train(_small(world), world, TrainConfig(lr=1e-3, warmup_iters=1, total_iters=3, epochs=2, grad_accum=1))
    assert len(r.log) == 6 and r.log[-1]["lr"] > 0


@pytest.mark.slow
def test_loss_drops_in_200_steps():
    world = generate_world(0)
    model = build_model(TransformerConfig(vocab_size=world.vocab.size, d_model=32), nx.make_rng(0))
    r = train(model, world, TrainConfig(lr=3e-3, warmup_iters=20, total_iters=200, grad_accum=1))
    losses = [x["loss"] for x in r.log]
    assert np.mean(losses[-20:]) < 0.8 * np.mean(losses[:10])


def test_nan_loss_aborts_and_keeps_last_good_checkpoint(world, tmp_path, monkeypatch):
    model = _small(world)
    calls = {"n": 0}
    original = rode.training.accumulate_gradients

    def poisoned(*args, **kwargs):
        calls["n"] += 1
        loss, by_task = original(*args, **kwargs)
        return (float("nan") if calls["n"] == 4 else loss), by_task

    monkeypatch.setattr(rode.training, "accumulate_gradients", poisoned)
    with pytest.raises(TrainingDivergedError) as info:
        train(model, world, TrainConfig(lr=1e-2, warmup_iters=1, total_iters=10, grad_accum=1), out_dir=tmp_path)
    assert info.value.step == 4
    assert info.value.checkpoint_path == tmp_path / "checkpoint.rode"
    restored, _ = load_checkpoint(tmp_path / "checkpoint.rode")
    for k, p in model.named_parameters().items():
        assert p.value.tobytes() == restored.named_parameters()[k].value.tobytes()
    assert len((tmp_path / "metrics.jsonl").read_text().splitlines()) == 3


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip_is_bitwise(toy_model, tmp_path):
    randomize_adapters(toy_model, nx.make_rng(4))
    path = save_checkpoint(toy_model, tmp_path / "m.rode", {"note": "x"})
    loaded, extra = load_checkpoint(path)
    assert extra == {"note": "x"}
    assert loaded.config == toy_model.config
    seq = [4, 30, 21, 1, 9]
    assert forward_logits(loaded, seq).value.tobytes() == forward_logits(toy_model, seq).value.tobytes()
    save_checkpoint(loaded, tmp_path / "again.rode", {"note": "x"})
    assert (tmp_path / "again.rode").read_bytes() == path.read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    bad = tmp_path / "bad.rode"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(DataError):
        load_checkpoint(bad)


def test_shared_base_across_variants(world):
    cfg = TransformerConfig(vocab_size=world.vocab.size, d_model=16, strategy="lr", rank_list=(8, 8))
    other = TransformerConfig(**{**cfg.to_dict(), "strategy": "top1", "rank_list": [2, 4, 6]})
    a = build_pretrained(cfg, world, seed=3, pretrain_steps=3)
    b = build_pretrained(other, world, seed=3, pretrain_steps=3)
    assert a.pretrained and b.pretrained
    for k, p in a.base_parameters().items():
        assert p.value.tobytes() == b.base_parameters()[k].value.tobytes(), k


# ---------------------------------------------------------------- gradient check


def _check_model(world):
    model = _small(world, seed=11)
    randomize_adapters(model, nx.make_rng(11))
    return model, sample_batch(world, (0, 0, 0, 1), 1, nx.make_rng(11))[0]


def test_grad_check_passes_and_confirms_frozen_zero(world):
    model, sample = _check_model(world)
    report = grad_check(model, sample)
    assert report.passed, report.summary()
    assert report.frozen_zero and all(report.frozen_zero.values())
    assert "PASS" in report.summary()


def test_grad_check_catches_corrupted_relu_backward(world, monkeypatch):
    model, sample = _check_model(world)
    monkeypatch.setattr(rode.numerics, "_relu_backward", lambda x, g: 0.5 * g * (x > 0))
    report = grad_check(model, sample)
    assert not report.passed
    assert any(".router." in name for name in report.failures())
