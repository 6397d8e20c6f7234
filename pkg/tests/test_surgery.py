import csv
import logging
import math

import numpy as np
import pytest

from mergesurgery import autodiff as ad
from mergesurgery.checkpoint import _decode, _encode
from mergesurgery.diagnostics import bias_report
from mergesurgery.merging import task_arithmetic, task_vector
from mergesurgery.models import EncoderSpec, finetune, make_tasks, pretrain
from mergesurgery.surgery import (
    SurgeryBundle,
    SurgeryModule,
    SurgeryTrainConfig,
    _task_loss,
    adapter_forward,
    apply_surgery,
    init_module,
    new_bundle,
    subsample,
    surgery_param_count,
    train_offline,
    train_online,
)


def hand_module():
    return SurgeryModule(0, np.array([[1.0, 0.0]], np.float32), np.array([[1.0], [-1.0]], np.float32))


def test_adapter_hand_case():
    z = np.array([[2.0, 3.0]], np.float32)
    assert adapter_forward(hand_module(), z).tolist() == [[2.0, -2.0]]
    assert apply_surgery(hand_module(), z).tolist() == [[0.0, 5.0]]


def test_adapter_preserves_zero_and_zero_weights():
    assert not np.any(adapter_forward(hand_module(), np.zeros((3, 2), np.float32)))
    m = init_module(0, 5, 3, np.random.default_rng(0))
    z = np.random.default_rng(1).normal(size=(4, 5)).astype(np.float32)
    assert not np.any(adapter_forward(m, z))
    assert np.array_equal(apply_surgery(m, z), z)


def test_surgery_is_not_linear_when_relu_flips():
    m = hand_module()
    z1, z2 = np.array([[2.0, 3.0]]), np.array([[-4.0, 0.0]])  # pre-activations 2, -4, and -2 for the sum
    lhs = apply_surgery(m, z1 + z2)
    rhs = apply_surgery(m, z1) + apply_surgery(m, z2)
    assert not np.allclose(lhs, rhs)


def test_width_mismatch():
    with pytest.raises(ad.DimensionError):
        adapter_forward(hand_module(), np.zeros((1, 3)))
    with pytest.raises(ad.DimensionError):
        SurgeryModule(0, np.zeros((2, 3)), np.zeros((2, 3)))


def test_init_ranges():
    m = init_module(0, 16, 8, np.random.default_rng(0))
    assert m.w_down.shape == (8, 16) and m.w_up.shape == (16, 8)
    assert np.all(np.abs(m.w_down) <= 0.25) and not np.any(m.w_up)
    assert m.n_params == 2 * 16 * 8


def test_param_counts():
    assert surgery_param_count(512, 16, 8) == 131_072
    assert surgery_param_count(768, 16, 8) == 196_608
    assert surgery_param_count(1, 1, 1) == 2
    with pytest.raises(ValueError):
        surgery_param_count(16, 0, 8)


def test_train_config_defaults_and_validation():
    c = SurgeryTrainConfig()
    assert (c.rank, c.lr, c.iterations, c.batch_size, c.betas, c.loss) == (16, 1e-3, 1000, 16, (0.9, 0.999), "l1")
    for bad in (dict(ratio=0.0), dict(ratio=1.5), dict(rank=0), dict(lr=0), dict(loss="huber"), dict(regime="batch")):
        with pytest.raises(ValueError):
            SurgeryTrainConfig(**bad)


def test_subsample_is_prefix_of_seeded_permutation():
    idx = subsample(41, 0.1, seed=3, task=2)
    assert len(idx) == math.ceil(4.1) == 5
    assert np.array_equal(idx, subsample(41, 0.1, seed=3, task=2))
    assert np.array_equal(subsample(41, 0.5, 3, 2)[:5], idx)
    assert len(set(subsample(41, 1.0, 3, 2).tolist())) == 41


@pytest.fixture(scope="module")
def setup():
    spec = EncoderSpec.from_sizes(12, 16, 6, 2)
    tasks = make_tasks(2, 3, 12, 3, n_train=90, n_test=60)
    theta0, _, _ = pretrain(spec, tasks, 80, seed=2)
    fts = [finetune(theta0, t, 120, seed=2, probe_steps=60) for t in tasks]
    individuals, heads = [th for th, _ in fts], [h for _, h in fts]
    merged = task_arithmetic(theta0, [task_vector(th, theta0) for th in individuals], 0.3)
    return merged, individuals, heads, [t.x_test for t in tasks]


CFG = SurgeryTrainConfig(rank=4, iterations=60, batch_size=8, lr=5e-3)


def test_offline_training_reduces_loss_and_bias(setup):
    merged, individuals, heads, inputs = setup
    bundle = new_bundle(merged, heads, 4, seed=0)
    trained, trace = train_offline(bundle, individuals, inputs, CFG)
    assert sum(trace.objective_final) < sum(trace.objective_initial)
    assert len(trace.per_task) == 60 and trace.samples_used == [60, 60, 60]
    before = bias_report(merged, individuals, inputs).mean
    after = bias_report(merged, individuals, inputs, trained).mean
    assert after < before


def test_training_leaves_frozen_inputs_untouched(setup):
    merged, individuals, heads, inputs = setup
    digests = [merged.digest()] + [t.digest() for t in individuals] + [h.to_map().digest() for h in heads]
    bundle = new_bundle(merged, heads, 4, seed=0)
    start = [m.w_down.tobytes() for m in bundle.modules]
    train_offline(bundle, individuals, inputs, CFG)
    train_online(bundle, individuals, [x[:5] for x in inputs], CFG)
    assert digests == [merged.digest()] + [t.digest() for t in individuals] + [h.to_map().digest() for h in heads]
    assert start == [m.w_down.tobytes() for m in bundle.modules]


def test_zero_iterations_is_identity(setup):
    merged, individuals, heads, inputs = setup
    bundle = new_bundle(merged, heads, 4, seed=0)
    trained, trace = train_offline(bundle, individuals, inputs, SurgeryTrainConfig(rank=4, iterations=0))
    for a, b in zip(trained.modules, bundle.modules):
        assert a.w_down.tobytes() == b.w_down.tobytes() and not np.any(a.w_up)
    assert trace.objective_initial == trace.objective_final
    for t, x in enumerate(inputs):
        assert np.array_equal(trained.features(t, x), trained.features(t, x, surgery=False))


def test_no_bias_case_stays_at_zero(setup):
    _, individuals, heads, inputs = setup
    same = individuals[0]
    bundle = new_bundle(same, heads, 4, seed=0)
    trained, trace = train_offline(bundle, [same] * 3, inputs, CFG)
    assert all(v == 0.0 for row in trace.per_task for v in row)
    assert all(not np.any(m.w_up) for m in trained.modules)
    assert bias_report(same, [same] * 3, inputs, trained).mean == 0.0


def test_per_task_isolation(setup):
    merged, individuals, heads, inputs = setup
    bundle = new_bundle(merged, heads, 4, seed=0)
    ref, _ = train_offline(bundle, individuals, inputs, CFG)
    zeroed = [inputs[0], np.zeros_like(inputs[1]), inputs[2]]
    other, _ = train_offline(bundle, individuals, zeroed, CFG)
    for t in (0, 2):
        assert ref.modules[t].w_up.tobytes() == other.modules[t].w_up.tobytes()
        assert ref.modules[t].w_down.tobytes() == other.modules[t].w_down.tobytes()


def test_cached_targets_are_identical(setup):
    merged, individuals, heads, inputs = setup
    bundle = new_bundle(merged, heads, 4, seed=0)
    a, ta = train_offline(bundle, individuals, inputs, CFG)
    b, tb = train_offline(bundle, individuals, inputs, SurgeryTrainConfig(**{**CFG.__dict__, "cache_targets": True}))
    assert ta.per_task == tb.per_task
    assert all(x.w_up.tobytes() == y.w_up.tobytes() for x, y in zip(a.modules, b.modules))


@pytest.mark.parametrize("kind", ad.LOSS_KINDS)
def test_every_loss_kind_trains(setup, kind):
    merged, individuals, heads, inputs = setup
    bundle = new_bundle(merged, heads, 4, seed=0)
    _, trace = train_offline(bundle, individuals, inputs, SurgeryTrainConfig(**{**CFG.__dict__, "loss": kind}))
    assert sum(trace.objective_final) < sum(trace.objective_initial)


def test_online_consumes_each_sample_once(setup):
    merged, individuals, heads, inputs = setup
    bundle = new_bundle(merged, heads, 4, seed=0)
    streams = [inputs[0][:7], inputs[1][:3], inputs[2][:0]]
    trained, trace = train_online(bundle, individuals, streams, CFG)
    assert trace.samples_used == [7, 3, 0]
    assert len(trace.per_task) == 7
    assert np.isnan(trace.per_task[5][1]) and np.isnan(trace.per_task[0][2])
    # a task with an empty stream keeps its zero-initialized module
    assert trained.modules[2].w_up.tobytes() == bundle.modules[2].w_up.tobytes()


def test_online_empty_stream_leaves_bundle_unchanged(setup):
    merged, individuals, heads, inputs = setup
    bundle = new_bundle(merged, heads, 4, seed=0)
    trained, trace = train_online(bundle, individuals, [x[:0] for x in inputs], CFG)
    assert trace.samples_used == [0, 0, 0] and trace.per_task == []
    assert all(a.w_down.tobytes() == b.w_down.tobytes() for a, b in zip(trained.modules, bundle.modules))


def test_online_follows_stream_order(setup):
    merged, individuals, heads, inputs = setup
    bundle = new_bundle(merged, heads, 4, seed=0)
    fwd, _ = train_online(bundle, individuals, [x[:6] for x in inputs], CFG)
    rev, _ = train_online(bundle, individuals, [x[:6][::-1] for x in inputs], CFG)
    assert fwd.modules[0].w_up.tobytes() != rev.modules[0].w_up.tobytes()


def test_offline_rejects_empty_task(setup):
    merged, individuals, heads, inputs = setup
    with pytest.raises(ValueError):
        train_offline(new_bundle(merged, heads, 4, 0), individuals, [inputs[0], inputs[1], inputs[2][:0]], CFG)


def test_neg_cosine_skips_zero_target_rows(caplog):
    pred = np.ones((3, 2), np.float32)
    target = np.array([[1.0, 1.0], [0.0, 0.0], [2.0, 2.0]], np.float32)
    with caplog.at_level(logging.WARNING):
        val = _task_loss("neg_cosine", pred, target, task=4)
    assert float(val) == pytest.approx(-1.0)
    assert "task 4" in caplog.text and "1 zero-norm" in caplog.text


def test_bundle_checkpoint_names_and_round_trip(setup):
    merged, _, heads, _ = setup
    bundle = new_bundle(merged, heads, 4, seed=0)
    pmap = bundle.modules_map()
    assert list(pmap) == [f"surgery/{t}/{w}" for t in range(3) for w in ("w_down", "w_up")]
    mods = SurgeryBundle.modules_from_map(_decode(_encode(pmap)))
    assert all(a.w_down.tobytes() == b.w_down.tobytes() for a, b in zip(mods, bundle.modules))


def test_bundle_invariants(setup):
    merged, _, heads, _ = setup
    with pytest.raises(ValueError):
        SurgeryBundle(merged, [init_module(0, 6, 4, np.random.default_rng(0))], heads)
    mods = [init_module(t, 6, 4 if t else 2, np.random.default_rng(t)) for t in range(3)]
    with pytest.raises(ValueError):
        SurgeryBundle(merged, mods, heads)


def test_trace_csv(tmp_path, setup):
    merged, individuals, heads, inputs = setup
    _, trace = train_offline(new_bundle(merged, heads, 4, 0), individuals, inputs, SurgeryTrainConfig(rank=4, iterations=3))
    trace.to_csv(tmp_path / "trace.csv")
    rows = list(csv.reader(open(tmp_path / "trace.csv")))
    assert rows[0] == ["iteration", "task0", "task1", "task2", "mean"]
    assert len(rows) == 4
    assert float(rows[1][-1]) == pytest.approx(np.mean([float(v) for v in rows[1][1:4]]))
