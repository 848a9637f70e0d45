import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lyra.model import LyraConfig, build
from lyra.numerics import ConfigError, Parameter, Rng, backward, tsum
from lyra.tasks import SequenceDataset
from lyra.train import (
    AdamW,
    NumericalAbort,
    TrainConfig,
    UndefinedMetricError,
    accuracy,
    cross_entropy_loss,
    evaluate,
    mse_loss,
    r2,
    r2_by_order,
    spearman,
    train_loop,
)

BARE = dict(d_input=1, d_model=1, pgc_hiddens=[], num_s4=0, d_output=1, encoder=False,
            dropout=0.0, final_dropout=0.0)


# --- optimiser ---------------------------------------------------------------


def test_zero_grad_zero_decay_leaves_parameter():
    p = Parameter(np.array([0.3, -1.2]))
    opt = AdamW([p], weight_decay=0.0)
    opt.step()
    assert np.array_equal(p.data, [0.3, -1.2])


def test_first_step_moves_by_lr():
    p = Parameter(np.array([1.0]))
    p.grad = np.array([1.0])
    AdamW([p], lr=1e-3, weight_decay=0.0).step()
    assert p.data[0] == pytest.approx(1 - 1e-3, abs=1e-10)


def test_three_steps_match_scalar_reference():
    # loss = 0.5 * a * (p - c)^2, gradient a * (p - c)
    a, c, lr, wd = 3.0, 0.25, 0.01, 0.1
    p = Parameter(np.array([2.0]))
    opt = AdamW([p], lr=lr, weight_decay=wd)
    for _ in range(3):
        p.zero_grad()
        backward(tsum((p - c) * (p - c)) * (0.5 * a))
        opt.step()

    q, m, v = 2.0, 0.0, 0.0
    for t in (1, 2, 3):
        g = a * (q - c)
        q *= 1 - lr * wd
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        q -= lr * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    assert p.data[0] == pytest.approx(q, abs=1e-12)
    # same recursion in 40-digit arithmetic
    assert p.data[0] == pytest.approx(1.964042789454897393940940525515364708913, abs=1e-12)


def test_decoupled_decay_and_kernel_overrides():
    model = build(LyraConfig(d_input=2, d_model=4, pgc_hiddens=[2], num_s4=1, d_state=4, d_output=1), Rng(0))
    before = {n: p.data.copy() for n, p in model.named_parameters()}
    opt = AdamW(model.parameters(), lr=1e-3, weight_decay=0.01)
    opt.step()
    for name, p in model.named_parameters():
        if ".kernel." in name:
            assert np.array_equal(p.data, before[name]), name
        else:
            assert np.array_equal(p.data, before[name] * (1 - 1e-3 * 0.01)), name


def test_kernel_lr_is_capped():
    p = Parameter(np.array([1.0]), lr_override=0.001)
    p.grad = np.array([1.0])
    AdamW([p], lr=0.1, weight_decay=0.0).step()
    assert p.data[0] == pytest.approx(1 - 0.001, abs=1e-9)
    q = Parameter(np.array([1.0]), lr_override=0.001)
    q.grad = np.array([1.0])
    AdamW([q], lr=0.0).step()
    assert q.data[0] == 1.0


def test_nan_gradient_aborts_naming_parameter():
    p = Parameter(np.ones(3), name="decoder.weight")
    p.grad = np.array([0.0, np.nan, 0.0])
    with pytest.raises(NumericalAbort, match="decoder.weight"):
        AdamW([p]).step()


def test_negative_hyperparameters_rejected():
    with pytest.raises(ConfigError):
        AdamW([], lr=-1.0)


# --- losses ---------------------------------------------------------------


def test_mse_zero_when_equal():
    x = Rng(0).normal(size=(3, 2))
    assert mse_loss(x, x).data == 0.0


def test_ce_uniform_two_class():
    assert float(cross_entropy_loss(np.zeros((1, 2)), np.array([0])).data) == pytest.approx(math.log(2), abs=1e-15)


def test_ce_matches_log_sum_exp_oracle():
    logits = np.array([[0.5, -1.0, 2.0], [0.0, 0.0, 0.0], [3.0, 1.0, -2.0], [-0.5, 0.25, 0.75]])
    labels = np.array([2, 1, 0, 1])
    # mean of logsumexp(z) - z[y], evaluated with 30-digit arithmetic
    assert float(cross_entropy_loss(logits, labels).data) == pytest.approx(0.65273760536633170471, abs=1e-12)


def test_ce_label_out_of_range():
    with pytest.raises(ValueError):
        cross_entropy_loss(np.zeros((2, 3)), np.array([0, 3]))


def test_ce_gradient_is_softmax_minus_onehot():
    z = Parameter(Rng(1).normal(size=(4, 3)))
    y = np.array([0, 2, 1, 1])
    backward(cross_entropy_loss(z, y))
    p = np.exp(z.data) / np.exp(z.data).sum(axis=1, keepdims=True)
    p[np.arange(4), y] -= 1
    assert np.allclose(z.grad, p / 4, atol=1e-15)


# --- metrics ---------------------------------------------------------------


def test_perfect_prediction_metrics():
    t = Rng(2).normal(size=20)
    assert r2(t, t) == 1.0
    assert spearman(t, t) == pytest.approx(1.0)


def test_reversed_ranks():
    t = np.arange(10.0)
    assert spearman(-t, t) == pytest.approx(-1.0)


def test_spearman_ties_against_average_rank_oracle():
    # ranks (1, 2.5, 2.5, 4) vs (1, 2, 3, 4), Pearson evaluated with 30-digit arithmetic
    assert spearman([1, 2, 2, 4], [1, 2, 3, 4]) == pytest.approx(0.9486832980505137996, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(3, 40))
def test_spearman_invariant_under_monotone_transform(seed, n):
    rng = Rng(seed)
    pred, target = rng.normal(size=n), rng.normal(size=n)
    assert spearman(np.exp(3 * pred) + 7, target) == pytest.approx(spearman(pred, target), abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(2, 30), j=st.integers(0, 29))
def test_r2_is_one_only_for_exact_prediction(seed, n, j):
    t = Rng(seed).normal(size=n)
    assert r2(t.copy(), t) == 1.0
    p = t.copy()
    p[j % n] += 1e-3
    assert r2(p, t) < 1.0


def test_undefined_metrics():
    with pytest.raises(UndefinedMetricError):
        r2([1.0, 2.0], [3.0, 3.0])
    with pytest.raises(UndefinedMetricError):
        r2([1.0], [1.0])
    with pytest.raises(UndefinedMetricError):
        spearman([1.0, 1.0], [1.0, 2.0])


def test_accuracy():
    assert accuracy([0, 1, 2, 2], [0, 1, 1, 2]) == 0.75


def test_r2_by_order_single_bucket():
    t = np.array([1.0, 2.0, 4.0])
    assert r2_by_order(t, t, [1, 1, 1]) == {1: 1.0}


def test_r2_by_order_single_sample_bucket_absent():
    t = np.array([1.0, 2.0, 4.0])
    out = r2_by_order(t + 0.1, t, [1, 1, 2])
    assert 2 not in out and 1 in out


def test_r2_by_order_equals_per_slice_r2():
    rng = Rng(3)
    orders = rng.integers(1, 5, size=60)
    t = rng.normal(size=60)
    p = t + 0.3 * rng.normal(size=60)
    out = r2_by_order(p, t, orders)
    for k in range(1, 5):
        sel = orders == k
        assert out[k] == r2(p[sel], t[sel])


# --- loop ----------------------------------------------------------------------------


def _linear_dataset(n=32):
    x = np.linspace(-1, 1, n)
    return SequenceDataset(x[:, None, None], 2 * x[:, None], np.array(["train"] * n))


def test_learns_y_equals_2x():
    model = build(LyraConfig(**BARE), Rng(0))
    res = train_loop(model, _linear_dataset(), TrainConfig(epochs=500, batch_size=8, lr=0.01, weight_decay=0.0,
                                                           eval_every=50))
    assert res.history[-1]["loss"] <= 1e-4
    assert model.decoder_W.data[0, 0] == pytest.approx(2.0, abs=1e-2)


def _small_task():
    rng = Rng(4)
    x = rng.normal(size=(40, 6, 2))
    y = x.sum(axis=(1, 2))[:, None]
    split = np.array(["train"] * 30 + ["test"] * 10)
    return SequenceDataset(x, y, split)


def _small_model(seed=0):
    return build(LyraConfig(d_input=2, d_model=4, pgc_hiddens=[3], num_s4=1, d_state=4, d_output=1), Rng(seed))


def test_zero_lr_keeps_parameters_and_loss():
    model = _small_model()
    before = model.state_dict()
    res = train_loop(model, _small_task(), TrainConfig(epochs=4, batch_size=10, lr=0.0, weight_decay=0.01))
    for n, v in model.state_dict().items():
        assert np.array_equal(v, before[n])
    test_losses = [r["loss"] for r in res.history if r["split"] == "test"]
    assert len(set(test_losses)) == 1


def test_fixed_seed_identical_curves():
    runs = []
    for _ in range(2):
        model = _small_model()
        runs.append(train_loop(model, _small_task(), TrainConfig(epochs=3, batch_size=7, seed=5)).history)
    assert runs[0] == runs[1]


def test_best_and_final_states_reported():
    model = _small_model()
    res = train_loop(model, _small_task(), TrainConfig(epochs=5, batch_size=10, lr=0.01))
    eval_rows = [r for r in res.history if r["split"] == "test"]
    assert res.best_loss == min(r["loss"] for r in eval_rows)
    assert res.best_epoch in [r["epoch"] for r in eval_rows]
    assert set(res.final_state) == set(res.best_state)


def test_epoch_labels_follow_real_epochs():
    res = train_loop(_small_model(), _small_task(), TrainConfig(epochs=6, batch_size=10, eval_every=2))
    assert [r["epoch"] for r in res.history if r["split"] == "train"] == [2, 4, 6]


def test_step_budget_mode():
    # 30 training rows at batch 4 is 8 steps per pass
    res = train_loop(_small_model(), _small_task(), TrainConfig(steps=20, batch_size=4, eval_every=8))
    rows = [r for r in res.history if r["split"] == "train"]
    assert [r["step"] for r in rows] == [8, 16, 20]
    assert [r["epoch"] for r in rows] == [1, 2, 3]


def test_empty_train_split_rejected():
    ds = _small_task()
    ds.split[:] = "test"
    with pytest.raises(ConfigError):
        train_loop(_small_model(), ds, TrainConfig(epochs=1))


def test_nan_loss_aborts():
    ds = _small_task()
    ds.labels[0] = np.nan
    with pytest.raises(NumericalAbort):
        train_loop(_small_model(), ds, TrainConfig(epochs=1, batch_size=40))


def test_train_config_validation():
    for bad in (dict(loss="hinge"), dict(epochs=0), dict(batch_size=0), dict(steps=0), dict(lr=-1)):
        with pytest.raises(ConfigError):
            TrainConfig(**bad).validate()
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"epoch": 3})


def test_evaluate_classification_and_metric_hook():
    model = build(LyraConfig(d_input=2, d_model=4, pgc_hiddens=[], num_s4=1, d_state=4, d_output=6), Rng(1))
    x = Rng(2).normal(size=(5, 4, 2))
    y = Rng(3).integers(0, 3, size=(5, 2))
    row = evaluate(model, x, y, TrainConfig(loss="cross_entropy", n_classes=3),
                   metrics_fn=lambda p, l: {"n": float(len(l))})
    assert set(row) == {"loss", "accuracy", "n"} and row["n"] == 5.0
