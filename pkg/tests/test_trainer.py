import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from peml.data import Split
from peml.errors import ConfigurationError, DataError, ParameterError, TaskError
from peml.model import Context
from peml.prefixnas import SearchSpace, catalog, generate_prefix
from peml.simplex import project_simplex
from peml.trainer import (MultiTaskBatch, StepReport, TaskBatch, TrainConfig, build_batch,
                          convergence_metrics, evaluate, history_csv, init_state, joint_loss,
                          train_loop, train_step)

from conftest import tiny_collection, tiny_model
from oracles import simplex_grid, simplex_kkt

SPACE = SearchSpace(2, catalog(3))


def _split(m, seq=6):
    return Split(np.zeros((m, seq), dtype=np.int64), np.arange(m) % 2)


def _state(model=None, **kw):
    model = model or tiny_model()
    cfg = TrainConfig(**{"prefix_length": 2, "lr": 1e-2, **kw})
    return init_state(model, cfg, SPACE, ["classification", "classification"])


# -- batches -----------------------------------------------------------------------------------

def test_batch_sizes_floor_and_clamp():
    rng = np.random.default_rng(0)
    assert build_batch([_split(100), _split(55)], 0.1, rng).sizes == [10, 5]
    assert build_batch([_split(5)], 0.1, rng).sizes == [1]


def test_batch_gamma_one_is_full_shuffle():
    b = build_batch([_split(30)], 1.0, np.random.default_rng(0))
    assert b.sizes == [30]
    assert sorted(b.tasks[0].labels.tolist()) == sorted((np.arange(30) % 2).tolist())


def test_batch_without_replacement():
    s = Split(np.arange(50)[:, None].repeat(6, 1), np.zeros(50, dtype=np.int64))
    b = build_batch([s], 0.5, np.random.default_rng(1))
    assert len(set(b.tasks[0].tokens[:, 0].tolist())) == 25


def test_batch_errors():
    with pytest.raises(DataError):
        build_batch([_split(0)], 0.5, np.random.default_rng(0))
    with pytest.raises(ParameterError):
        build_batch([_split(4)], 0.0, np.random.default_rng(0))


# -- config ------------------------------------------------------------------------------------

@pytest.mark.parametrize("kw", [dict(lr=2.0), dict(lr=1e-6), dict(gamma=0), dict(gamma=1.5),
                                dict(lam=-1), dict(patience=0), dict(strategy="x"),
                                dict(parameterization="simplex", strategy="ste"), dict(mode="x")])
def test_train_config_rejects(kw):
    with pytest.raises(ConfigurationError):
        TrainConfig(**kw)


def test_inv_sqrt_schedule():
    c = TrainConfig(lr=0.5, schedule="inv_sqrt", total_steps=400)
    assert c.lr_at(0) == c.lr_at(399) == pytest.approx(0.5 / 20)


# -- joint loss --------------------------------------------------------------------------------

def _batch(coll, seed=0):
    return build_batch(coll, 0.25, np.random.default_rng(seed))


def test_joint_loss_lambda_zero_is_task_mean():
    st_ = _state()
    b = _batch(tiny_collection(families=("pattern", "order")))
    pre = generate_prefix(st_.generator, st_.arch)
    loss, parts, reg = joint_loss(st_.model, b, pre, st_.arch, 0.0, st_.adapters, Context())
    assert loss.item() == pytest.approx(np.mean(parts), abs=1e-15)


def test_joint_loss_uniform_alpha_adds_ln_k():
    model = tiny_model()
    space = SearchSpace(1, catalog(4))
    cfg = TrainConfig(prefix_length=2, lam=1.0)
    st_ = init_state(model, cfg, space)
    b = _batch(tiny_collection(families=("pattern", "order")))
    pre = generate_prefix(st_.generator, st_.arch)
    loss, parts, reg = joint_loss(model, b, pre, st_.arch, 1.0, st_.adapters, Context())
    assert loss.item() == pytest.approx(np.mean(parts) + math.log(4), abs=1e-12)
    assert reg == pytest.approx(math.log(4), abs=1e-15)


def test_joint_loss_single_task():
    st_ = _state()
    b = _batch(tiny_collection(families=("pattern", "order")))
    one = MultiTaskBatch([b.tasks[1]])
    pre = generate_prefix(st_.generator, st_.arch)
    loss, parts, reg = joint_loss(st_.model, one, pre, st_.arch, 0.3, st_.adapters, Context())
    assert len(parts) == 1
    assert loss.item() == pytest.approx(parts[0] + 0.3 * reg, abs=1e-12)


def test_joint_loss_head_mismatch():
    st_ = _state()
    bad = MultiTaskBatch([TaskBatch(0, np.zeros((2, 6), dtype=int), np.zeros(2), "regression")])
    with pytest.raises(TaskError):
        joint_loss(st_.model, bad, None, None, 0.0)
    bad = MultiTaskBatch([TaskBatch(5, np.zeros((2, 6), dtype=int), np.zeros(2, dtype=int), "classification")])
    with pytest.raises(TaskError):
        joint_loss(st_.model, bad, None, None, 0.0)


def test_regression_task_uses_mse():
    model = tiny_model(n_classes=[1])
    tb = TaskBatch(0, np.random.default_rng(0).integers(0, 16, (5, 6)), np.linspace(-1, 1, 5), "regression")
    loss, parts, _ = joint_loss(model, MultiTaskBatch([tb]), None, None, 0.0)
    pred = model.forward(tb.tokens, 0).data.reshape(-1)
    assert parts[0] == pytest.approx(np.mean((pred - tb.labels) ** 2), abs=1e-14)


# -- steps ---------------------------------------------------------------------------------------

def test_step_report_decomposition():
    st_ = _state(lam=0.05)
    coll = tiny_collection(families=("pattern", "order"))
    for i in range(5):
        r = train_step(st_, _batch(coll, i))
        assert r.joint_loss == pytest.approx(np.mean(r.task_losses) + 0.05 * r.regularizer, abs=1e-10)


def test_lr_zero_leaves_everything_bit_identical():
    st_ = _state(lr=0, prune_threshold=0)
    before = st_.snapshot()
    train_step(st_, _batch(tiny_collection(families=("pattern", "order"))))
    for a, b in zip(before, st_.snapshot()):
        np.testing.assert_array_equal(a, b)


def test_base_checksum_stable_over_steps():
    st_ = _state()
    coll = tiny_collection(families=("pattern", "order"))
    before = st_.model.base.checksum()
    for i in range(50):
        train_step(st_, _batch(coll, i))
    assert st_.model.base.checksum() == before


def test_simultaneous_differs_from_alternating_and_coincides_at_lr_zero():
    coll = tiny_collection(families=("pattern", "order"))
    b = _batch(coll)
    a, c = _state(optimizer="sgd", lr=0.5, prune_threshold=0), _state(optimizer="sgd", lr=0.5, prune_threshold=0)
    train_step(a, b)
    train_step(c, b, order="alternating")
    assert not all(np.array_equal(x.data, y.data) for x, y in zip(a.arch.rows, c.arch.rows))
    a, c = _state(lr=0, prune_threshold=0), _state(lr=0, prune_threshold=0)
    train_step(a, b)
    train_step(c, b, order="alternating")
    for x, y in zip(a.snapshot(), c.snapshot()):
        np.testing.assert_array_equal(x, y)


def test_simultaneous_uses_pre_step_gradients():
    """One SGD step equals param - lr * grad evaluated at the starting point."""
    from peml import autodiff as ad
    from peml.trainer import _forward_loss
    coll = tiny_collection(families=("pattern", "order"))
    b = _batch(coll)
    st_ = _state(optimizer="sgd", lr=0.1, prune_threshold=0)
    flat = [p for ps in st_.groups().values() for p in ps]
    loss, _, _ = _forward_loss(st_, b, 0)
    grads = ad.grad(loss, flat)
    expect = [p.data - 0.1 * g for p, g in zip(flat, grads)]
    train_step(st_, b)
    for p, e in zip(flat, expect):
        np.testing.assert_allclose(p.data, e, atol=1e-14)


def test_simplex_rows_stay_on_simplex():
    st_ = _state(parameterization="simplex", optimizer="sgd", lr=0.5, prune_threshold=0)
    coll = tiny_collection(families=("pattern", "order"))
    for i in range(10):
        train_step(st_, _batch(coll, i))
        for r in st_.arch.rows:
            assert (r.data >= 0).all() and abs(r.data.sum() - 1) < 1e-12


def test_linearly_separable_loss_decreases():
    model = tiny_model(n_blocks=1, n_classes=[2])
    coll = tiny_collection(families=("pattern",), n_train=60)
    wins = 0
    for seed in range(10):
        cfg = TrainConfig(seed=seed, prefix_length=2, lr=1e-2, gamma=0.5, prune_threshold=0)
        st_ = init_state(model, cfg, SearchSpace(1, catalog(2)))
        data = MultiTaskBatch([TaskBatch(0, coll.tasks[0].splits["train"].tokens,
                                         coll.tasks[0].splits["train"].labels, "classification")])
        from peml.trainer import evaluate_loss, eval_weights
        start = evaluate_loss(st_, data, eval_weights(st_.arch, "softmax"))
        rng = np.random.default_rng(seed)
        for _ in range(200):
            train_step(st_, build_batch(coll, 0.5, rng))
        wins += evaluate_loss(st_, data, eval_weights(st_.arch, "softmax")) < start
    assert wins >= 10


# -- projection ------------------------------------------------------------------------------

def test_projection_examples():
    np.testing.assert_array_equal(project_simplex([0.2, 0.3, 0.5]), [0.2, 0.3, 0.5])
    np.testing.assert_allclose(project_simplex([2.0, 0.0]), [1.0, 0.0], atol=1e-15)
    np.testing.assert_allclose(project_simplex([0.5, 0.5, 0.5]), [1 / 3] * 3, atol=1e-15)
    np.testing.assert_allclose(simplex_grid([2.0, 0.0], 1e-4), [1.0, 0.0], atol=1e-4)
    np.testing.assert_allclose(simplex_grid([0.5, 0.5, 0.5], 1e-3), [1 / 3] * 3, atol=1e-3)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(1, 4), elements=st.floats(-3, 3, allow_nan=False)))
def test_projection_matches_kkt_enumeration(v):
    x = project_simplex(v)
    assert (x >= 0).all() and abs(x.sum() - 1) <= 1e-12
    np.testing.assert_allclose(x, simplex_kkt(v), atol=1e-10)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, 4, elements=st.floats(-3, 3, allow_nan=False)),
       arrays(np.float64, 4, elements=st.floats(-3, 3, allow_nan=False)))
def test_projection_non_expansive(a, b):
    assert np.linalg.norm(project_simplex(a) - project_simplex(b)) <= np.linalg.norm(a - b) + 1e-12


# -- loop -------------------------------------------------------------------------------------

def test_early_stop_fires_exactly_at_patience():
    model = tiny_model()
    coll = tiny_collection(families=("pattern", "order"))
    res = train_loop(TrainConfig(lr=0, patience=25, max_epochs=100, steps_per_epoch=1, prefix_length=2,
                                 prune_threshold=0), coll, model, SPACE)
    assert res.epochs == 26
    assert len(res.history) == 26


def test_history_length_and_reevaluation():
    model = tiny_model()
    coll = tiny_collection(families=("pattern", "order"))
    cfg = TrainConfig(max_epochs=3, prefix_length=2, steps_per_epoch=4)
    res = train_loop(cfg, coll, model, SPACE)
    assert len(res.history) == 12
    assert res.arch.discretized and res.model.merged
    _, again = evaluate(res.model, coll, "val", res.generator, res.arch)
    assert abs(again - res.final_val) < 1e-6
    csv = history_csv(res.history, ["a", "b"]).splitlines()
    assert csv[0].split(",")[:4] == ["step", "epoch", "loss_a", "loss_b"]
    assert len(csv) == 13


def test_modes_disable_components():
    model = tiny_model()
    lo = init_state(model, TrainConfig(mode="lora-only"), SPACE)
    po = init_state(model, TrainConfig(mode="prefix-only"), SPACE)
    assert lo.generator is None and lo.arch is None and lo.adapters is not None
    assert po.adapters is None and po.generator is not None


def test_per_task_updates_flag():
    model = tiny_model()
    coll = tiny_collection(families=("pattern", "order"))
    res = train_loop(TrainConfig(max_epochs=1, steps_per_epoch=3, per_task_updates=True, prefix_length=2),
                     coll, model, SPACE)
    assert len(res.history) == 6


def test_convergence_metrics_constant_norm():
    hist = [StepReport(i, 0, [0.0], 0.0, 0.0, 1.5, 0, 0, 0, 0, 0.1) for i in range(10)]
    rep = convergence_metrics(hist, window=3)
    np.testing.assert_allclose(rep.running_mean, 2.25)
    np.testing.assert_allclose(rep.moving_mean, 2.25)
    assert math.isnan(rep.lipschitz)
    with pytest.raises(ParameterError):
        convergence_metrics(hist, window=11)
    with pytest.raises(ParameterError):
        convergence_metrics([])


def test_lipschitz_zero_when_theta_static():
    model = tiny_model()
    coll = tiny_collection(families=("pattern", "order"))
    cfg = TrainConfig(max_epochs=1, steps_per_epoch=4, prefix_length=2, lipschitz_every=1,
                      lr_scale={"lora": 0.0, "prefix": 0.0, "alpha": 1.0})
    res = train_loop(cfg, coll, model, SPACE)
    assert convergence_metrics(res.history).lipschitz == 0.0
    res = train_loop(replace(cfg, lr_scale={"lora": 1.0, "prefix": 1.0, "alpha": 1.0}), coll, model, SPACE)
    lip = convergence_metrics(res.history).lipschitz
    assert math.isfinite(lip) and lip > 0
