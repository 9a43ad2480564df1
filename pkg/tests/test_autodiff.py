import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from squeezetrain import autodiff as ad


def scalar_mlp(x, w1, b1, w2, b2):
    """Straight-line float64 reference: relu(x W1 + b1) W2 + b2, one scalar at a time."""
    out = []
    for row in x:
        hidden = []
        for j in range(len(b1)):
            s = b1[j]
            for i in range(len(row)):
                s += float(row[i]) * float(w1[i][j])
            hidden.append(max(s, 0.0))
        logits = []
        for k in range(len(b2)):
            s = b2[k]
            for j in range(len(hidden)):
                s += hidden[j] * float(w2[j][k])
            logits.append(s)
        out.append(logits)
    return np.array(out)


def mlp_expr(n, d, h, c):
    x = ad.slot("x", (n, d))
    hid = ad.relu(ad.bias_add(x @ ad.slot("w1", (d, h)), ad.slot("b1", (h,))))
    return ad.bias_add(hid @ ad.slot("w2", (h, c)), ad.slot("b2", (c,)))


def random_bindings(rng, n=4, d=5, h=6, c=3):
    return {
        "x": rng.standard_normal((n, d)).astype(np.float32),
        "w1": rng.standard_normal((d, h)).astype(np.float32),
        "b1": rng.standard_normal(h).astype(np.float32),
        "w2": rng.standard_normal((h, c)).astype(np.float32),
        "b2": rng.standard_normal(c).astype(np.float32),
    }


def test_relu_forward():
    x = ad.slot("x", (2,))
    assert ad.forward(ad.relu(x), {"x": np.array([-1.0, 2.0])}).tolist() == [0.0, 2.0]


def test_softmax_uniform_on_zero_logits():
    z = ad.slot("z", (1, 2))
    np.testing.assert_array_equal(ad.forward(ad.softmax(z), {"z": np.zeros((1, 2))}), [[0.5, 0.5]])


def test_mlp_forward_matches_scalar_reference():
    b = random_bindings(np.random.default_rng(0))
    got = ad.forward(mlp_expr(4, 5, 6, 3), b)
    ref = scalar_mlp(b["x"], b["w1"], b["b1"], b["w2"], b["b2"])
    np.testing.assert_allclose(got, ref, atol=1e-6 * max(1.0, np.abs(ref).max()))


def test_forward_is_bit_identical_across_calls():
    b = random_bindings(np.random.default_rng(1))
    e = mlp_expr(4, 5, 6, 3)
    assert ad.forward(e, b).tobytes() == ad.forward(e, b).tobytes()


def test_float32_by_default():
    b = random_bindings(np.random.default_rng(1))
    assert ad.forward(mlp_expr(4, 5, 6, 3), b).dtype == np.float32


def test_square_gradient():
    x = ad.slot("x", ())
    g = ad.backward(x * x, {"x": np.float32(3.0)}, ["x"])
    assert float(g["x"]) == 6.0


def test_relu_subgradient():
    x = ad.slot("x", (2,))
    g = ad.backward(ad.sum(ad.relu(x)), {"x": np.array([-1.0, 2.0], np.float32)}, ["x"])
    assert g["x"].tolist() == [0.0, 1.0]


def test_relu_subgradient_at_zero_is_zero():
    x = ad.slot("x", (3,))
    g = ad.backward(ad.sum(ad.relu(x)), {"x": np.zeros(3, np.float32)}, ["x"])
    assert g["x"].tolist() == [0.0, 0.0, 0.0]


def ce_of_linear(n=5, d=4, c=3):
    x = ad.slot("x", (n, d))
    w = ad.slot("w", (d, c))
    y = ad.index_slot("y", n)
    z = x @ w
    return ad.mean(ad.logsumexp(z) - ad.gather(z, y))


def central_differences(expr, bindings, name, h=1e-3):
    base = np.asarray(bindings[name], dtype=np.float64)
    out = np.zeros_like(base)
    b64 = {k: (np.asarray(v, np.float64) if np.asarray(v).dtype.kind == "f" else v)
           for k, v in bindings.items()}
    for i in np.ndindex(base.shape):
        up, dn = base.copy(), base.copy()
        up[i] += h
        dn[i] -= h
        out[i] = (float(ad.forward(expr, {**b64, name: up}))
                  - float(ad.forward(expr, {**b64, name: dn}))) / (2 * h)
    return out


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_cross_entropy_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    b = {"x": rng.standard_normal((5, 4)), "w": rng.standard_normal((4, 3)),
         "y": rng.integers(0, 3, 5)}
    e = ce_of_linear()
    analytic = ad.backward(e, b, ["w", "x"])
    for name in ("w", "x"):
        num = central_differences(e, b, name)
        rel = np.abs(analytic[name] - num).max() / np.abs(num).max()
        assert rel < 1e-4


def test_grad_check_linear_is_exact():
    x = ad.slot("x", (6,))
    w = ad.slot("w", (6,))
    rng = np.random.default_rng(3)
    rep = ad.grad_check(ad.sum(w * x), {"x": rng.standard_normal(6), "w": rng.standard_normal(6)},
                        ["w", "x"])
    assert rep.passed and rep.max_error < 1e-9


def test_grad_check_mlp_with_cross_entropy_passes():
    rng = np.random.default_rng(4)
    b = random_bindings(rng)
    b["y"] = rng.integers(0, 3, 4)
    z = mlp_expr(4, 5, 6, 3)
    loss = ad.mean(ad.logsumexp(z) - ad.gather(z, ad.index_slot("y", 4)))
    rep = ad.grad_check(loss, b, ["w1", "b1", "w2", "b2", "x"], h=1e-3, tol=1e-4)
    assert rep.passed, rep.errors


def test_grad_check_catches_corrupted_rule(monkeypatch):
    rng = np.random.default_rng(4)
    b = random_bindings(rng)
    loss = ad.sum(ad.relu(mlp_expr(4, 5, 6, 3)))
    monkeypatch.setitem(ad._VJP, "relu", lambda a, g, o, c, x: (g * (x > 0) * 1.5,))
    rep = ad.grad_check(loss, b, ["w1"], h=1e-3, tol=1e-4)
    assert not rep.passed and rep.max_error > 1e-4


def test_errors():
    x = ad.slot("x", (2, 3))
    with pytest.raises(ad.BindingError, match="unbound slot 'x'"):
        ad.forward(ad.relu(x), {})
    with pytest.raises(ad.BindingError, match="expects shape"):
        ad.forward(ad.relu(x), {"x": np.zeros((3, 2))})
    with pytest.raises(ad.ShapeError, match="matmul"):
        x @ ad.slot("w", (4, 2))
    with pytest.raises(ad.ShapeError, match="scalar root"):
        ad.backward(ad.relu(x), {"x": np.zeros((2, 3))}, ["x"])
    with pytest.raises(ValueError):
        ad.backward(ad.sum(x), {"x": np.zeros((2, 3))}, [])
    with pytest.raises(ad.BindingError, match="NaN"):
        ad.forward(ad.relu(x), {"x": np.full((2, 3), np.nan)})


def test_label_out_of_range():
    z = ad.slot("z", (1, 3))
    e = ad.gather(z, ad.index_slot("y", 1))
    with pytest.raises(ad.ShapeError, match="label out of range"):
        ad.forward(e, {"z": np.zeros((1, 3)), "y": np.array([3])})


def test_shared_slot_gradients_accumulate():
    x = ad.slot("x", (3,))
    x_again = ad.slot("x", (3,))
    g = ad.backward(ad.sum(x * x_again), {"x": np.array([1.0, 2.0, 3.0], np.float32)}, ["x"])
    assert g["x"].tolist() == [2.0, 4.0, 6.0]


# -- per-op property checks -------------------------------------------------

dims = st.integers(min_value=1, max_value=4)


def _check(expr, bindings, wrt):
    rep = ad.grad_check(expr, bindings, wrt, h=1e-3, tol=1e-4)
    assert rep.passed, rep.errors


def _away_from_zero(rng, shape, gap=0.05):
    v = rng.standard_normal(shape)
    return np.where(np.abs(v) < gap, np.sign(v + 1e-12) * gap, v)


def _weights(rows):
    return ad.const(np.linspace(-1, 1, int(np.prod(rows))).reshape(rows) + 0.3)


@settings(max_examples=15, deadline=None)
@given(n=dims, c=dims, seed=st.integers(0, 10_000))
def test_elementwise_ops_gradients(n, c, seed):
    rng = np.random.default_rng(seed)
    a, b = ad.slot("a", (n, c)), ad.slot("b", (n, c))
    w = _weights((n, c))
    binds = {"a": _away_from_zero(rng, (n, c)), "b": rng.standard_normal((n, c))}
    for e in (a + b, a - b, a * b, 2.5 * a, ad.relu(a)):
        _check(ad.sum(e * w), binds, ["a", "b"] if "b" in e.slots() else ["a"])
    pos = {"a": np.abs(binds["a"]) + 0.5}
    _check(ad.sum(ad.log(a) * w), pos, ["a"])
    _check(ad.sum(ad.clamp_min(a, 0.0) * w), binds, ["a"])


@settings(max_examples=15, deadline=None)
@given(n=dims, c=st.integers(2, 5), seed=st.integers(0, 10_000))
def test_row_ops_gradients(n, c, seed):
    rng = np.random.default_rng(seed)
    z = ad.slot("z", (n, c))
    y = ad.index_slot("y", n)
    labels = rng.integers(0, c, n)
    # distinct, well separated values keep max_except away from ties
    vals = rng.permutation(n * c).reshape(n, c) * 0.3 + 0.01 * rng.standard_normal((n, c))
    binds = {"z": vals, "y": labels}
    wr = _weights((n,))
    for e in (ad.logsumexp(z), ad.gather(z, y), ad.max_except(z, y), ad.sum(z, axis=-1)):
        _check(ad.sum(e * wr), binds, ["z"])
    _check(ad.sum(ad.softmax(z) * _weights((n, c))), binds, ["z"])
    _check(ad.mean(z * _weights((n, c))), binds, ["z"])


@settings(max_examples=10, deadline=None)
@given(m=dims, k=dims, n=dims, seed=st.integers(0, 10_000))
def test_matmul_bias_reshape_gradients(m, k, n, seed):
    rng = np.random.default_rng(seed)
    a, b, bias = ad.slot("a", (m, k)), ad.slot("b", (k, n)), ad.slot("bias", (n,))
    e = ad.reshape(ad.bias_add(a @ b, bias), (m * n,))
    binds = {"a": rng.standard_normal((m, k)), "b": rng.standard_normal((k, n)),
             "bias": rng.standard_normal(n)}
    _check(ad.sum(e * _weights((m * n,))), binds, ["a", "b", "bias"])


@settings(max_examples=8, deadline=None)
@given(n=st.integers(1, 2), c=st.integers(1, 3), f=st.integers(1, 3), pad=st.integers(0, 1),
       seed=st.integers(0, 10_000))
def test_conv_and_pool_gradients(n, c, f, pad, seed):
    rng = np.random.default_rng(seed)
    x, w, bias = ad.slot("x", (n, c, 4, 4)), ad.slot("w", (f, c, 3, 3)), ad.slot("bias", (f,))
    conv = ad.bias_add(ad.conv2d(x, w, padding=pad), bias)
    binds = {"x": rng.standard_normal((n, c, 4, 4)), "w": rng.standard_normal((f, c, 3, 3)),
             "bias": rng.standard_normal(f)}
    _check(ad.sum(conv * _weights(conv.shape)), binds, ["x", "w", "bias"])
    # distinct values keep the pooling argmax away from ties
    px = ad.slot("px", (n, c, 4, 4))
    pooled = ad.maxpool2d(px)
    pvals = rng.permutation(n * c * 16).reshape(n, c, 4, 4) * 0.1
    _check(ad.sum(pooled * _weights(pooled.shape)), {"px": pvals}, ["px"])


def test_conv_matches_direct_loops():
    rng = np.random.default_rng(5)
    xv = rng.standard_normal((2, 2, 5, 5)).astype(np.float32)
    wv = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
    got = ad.forward(ad.conv2d(ad.slot("x", xv.shape), ad.slot("w", wv.shape), padding=1),
                     {"x": xv, "w": wv})
    xp = np.pad(xv.astype(np.float64), ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 3, 5, 5))
    for n in range(2):
        for f in range(3):
            for i in range(5):
                for j in range(5):
                    ref[n, f, i, j] = (xp[n, :, i:i + 3, j:j + 3] * wv[f]).sum()
    np.testing.assert_allclose(got, ref, atol=1e-5)


def test_logsumexp_is_stable():
    z = ad.slot("z", (1, 3))
    v = ad.forward(ad.logsumexp(z), {"z": np.array([[1000.0, 0.0, -1000.0]], np.float32)})
    assert math.isclose(float(v[0]), 1000.0, rel_tol=1e-6)


def test_maxpool_ties_route_gradient_to_first_member():
    x = ad.slot("x", (1, 1, 2, 2))
    v = np.array([[[[0.0, 1.0], [1.0, 1.0]]]], np.float32)
    g = ad.backward(ad.sum(ad.maxpool2d(x)), {"x": v}, ["x"])
    assert g["x"].ravel().tolist() == [0.0, 1.0, 0.0, 0.0]
