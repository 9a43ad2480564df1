import numpy as np
import pytest

from squeezetrain import autodiff as ad
from squeezetrain.divergences import reg_loss
from squeezetrain.models import ModelSpec, init_params, probs
from squeezetrain.squeeze_inner import (NEUTRAL, InnerConfig, _pair_graph, _select,
                                        classify_neighbor, squeeze_pair)


def batch(mnist, n):
    te = mnist[1]
    return te.inputs[:n], te.labels[:n]


def assert_chain(pair):
    for rec in pair.trace:
        assert (rec.ce_col <= rec.ce_benign).all() and (rec.ce_benign <= rec.ce_adv).all()
        assert (rec.g_inner >= 0).all()


def test_config_rejects_asymmetric_regularizer():
    with pytest.raises(ValueError, match="symmetric"):
        InnerConfig(reg="kl")
    with pytest.raises(ValueError):
        InnerConfig(K=-1)


def test_tie_preferences():
    x, x1, x2 = (np.full((3, 1), v, np.float32) for v in (0.0, 1.0, 2.0))
    ce = np.array([1.0, 1.0, 1.0])
    ce1 = np.array([1.0, 0.5, 1.0])
    ce2 = np.array([1.0, 1.0, 2.0])
    x_adv, x_col, _, _ = _select(x, x1, x2, ce, ce1, ce2)
    # row 0: all tie -> adv x', col x''. row 1: x' lowest, x/x'' tie high -> adv x, col x'.
    # row 2: x'' highest, x/x' tie low -> adv x'', col x
    assert x_adv[:, 0].tolist() == [1.0, 0.0, 2.0]
    assert x_col[:, 0].tolist() == [2.0, 1.0, 0.0]


def test_k_zero_is_a_single_selection(standard_mlp, mnist):
    spec, params = standard_mlp
    x, y = batch(mnist, 16)
    pair = squeeze_pair(spec, params, x, y, InnerConfig(K=0, alpha=0.01, epsilon=0.3, seed=1))
    assert len(pair.trace) == 1
    assert np.abs(pair.x_adv - x).max() <= 0.01 and np.abs(pair.x_col - x).max() <= 0.01
    assert_chain(pair)


def test_zero_budget_pins_both_members(standard_mlp, mnist):
    spec, params = standard_mlp
    x, y = batch(mnist, 8)
    pair = squeeze_pair(spec, params, x, y, InnerConfig(K=3, alpha=0.01, epsilon=0.0))
    assert pair.x_adv.tobytes() == x.tobytes() and pair.x_col.tobytes() == x.tobytes()
    assert all(not rec.g_inner.any() for rec in pair.trace)


def test_trained_model_orders_the_pair(standard_mlp, mnist):
    spec, params = standard_mlp
    x, y = batch(mnist, 256)
    cfg = InnerConfig(K=10, alpha=0.075, epsilon=0.3, seed=2)
    pair = squeeze_pair(spec, params, x, y, cfg)
    last = pair.trace[-1]
    assert last.ce_adv.mean() > last.ce_benign.mean() > last.ce_col.mean()
    assert np.abs(pair.x_adv - x).max() <= 0.3 + 1e-6 and np.abs(pair.x_col - x).max() <= 0.3 + 1e-6
    for m in (pair.x_adv, pair.x_col):
        assert m.min() >= 0 and m.max() <= 1
    assert_chain(pair)


def test_trace_records_discrepancy_of_selected_pair(standard_mlp, mnist):
    # runs with smaller K replay the same selections, so their returned pair is trace[k]'s pair
    spec, params = standard_mlp
    x, y = batch(mnist, 12)
    long = squeeze_pair(spec, params, x, y, InnerConfig(K=3, alpha=0.05, epsilon=0.3, reg="js", seed=5))
    for k in range(4):
        short = squeeze_pair(spec, params, x, y, InnerConfig(K=k, alpha=0.05, epsilon=0.3, reg="js", seed=5))
        recomputed = reg_loss("js", probs(spec, params, short.x_adv), probs(spec, params, short.x_col))
        np.testing.assert_allclose(short.trace[-1].g_inner, recomputed, rtol=1e-5, atol=1e-7)
        assert short.trace[-1].g_inner.tobytes() == long.trace[k].g_inner.tobytes()


def test_post_select_adds_one_selection(standard_mlp, mnist):
    spec, params = standard_mlp
    x, y = batch(mnist, 8)
    pair = squeeze_pair(spec, params, x, y, InnerConfig(K=2, alpha=0.05, epsilon=0.3, post_select=True))
    assert len(pair.trace) == 4
    assert_chain(pair)


def test_deterministic(standard_mlp, mnist):
    spec, params = standard_mlp
    x, y = batch(mnist, 8)
    cfg = InnerConfig(K=4, alpha=0.05, epsilon=0.3, seed=9)
    a, b = squeeze_pair(spec, params, x, y, cfg), squeeze_pair(spec, params, x, y, cfg)
    assert a.x_adv.tobytes() == b.x_adv.tobytes() and a.x_col.tobytes() == b.x_col.tobytes()


def test_sign_step_increases_discrepancy_on_binary_classifier():
    spec = ModelSpec("mlp", (6,), 2, (8,))
    params = init_params(spec, 0)
    rng = np.random.default_rng(0)
    x_adv = rng.uniform(0.3, 0.7, (5, 6)).astype(np.float64)
    x_col = np.clip(x_adv + rng.normal(0, 0.2, x_adv.shape), 0, 1)
    total, rows = _pair_graph(spec, 5, InnerConfig().reg)
    binds = {**{k: v.astype(np.float64) for k, v in params.items()}, "x_adv": x_adv, "x_col": x_col}
    before, grads, _ = ad.value_and_grad(total, binds, ["x_adv"])
    after = ad.forward(total, {**binds, "x_adv": x_adv + 1e-4 * np.sign(grads["x_adv"])})
    assert float(after) > float(before)
    # first order: the change matches the directional derivative
    predicted = 1e-4 * np.abs(grads["x_adv"]).sum()
    assert float(after - before) == pytest.approx(predicted, rel=1e-2)


def test_classify_neighbor(standard_mlp, mnist):
    spec, params = standard_mlp
    x, y = batch(mnist, 4)
    assert (classify_neighbor(spec, params, x, y, x) == NEUTRAL).all()
    with pytest.raises(ValueError, match="shape mismatch"):
        classify_neighbor(spec, params, x, y, x[:2])
