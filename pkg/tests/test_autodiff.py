import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avalign import autodiff as ad
from avalign.gradcheck import grad_check, numerical_gradient, relative_error
from avalign.nn import Params


def param(name, data):
    return ad.Parameter(name, np.asarray(data, dtype=np.float64))


def triple_loop(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


# -- matmul ---------------------------------------------------------------


def test_matmul_identity():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(ad.matmul(np.eye(2), m).data, m)


def test_matmul_projector():
    out = ad.matmul(np.array([[1.0, 0.0], [0.0, 0.0]]), np.array([[5.0], [7.0]]))
    assert np.array_equal(out.data, [[5.0], [0.0]])


def test_matmul_matches_triple_loop(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    assert np.max(np.abs(ad.matmul(a, b).data - triple_loop(a, b))) <= 1e-12


def test_matmul_shape_mismatch():
    with pytest.raises(ad.ShapeError):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_batched_left_operand(rng):
    a, w = param("a", rng.normal(size=(2, 3, 4))), param("w", rng.normal(size=(4, 5)))
    assert grad_check(lambda: ad.sum(ad.tanh(ad.matmul(a, w))), {"a": a, "w": w}).passed


# -- softmax --------------------------------------------------------------


def test_softmax_uniform():
    assert np.allclose(ad.softmax(np.zeros(3)).data, [1 / 3] * 3, atol=1e-15)


def test_softmax_two_logits():
    e2 = math.exp(2.0)
    assert np.allclose(ad.softmax(np.array([2.0, 0.0])).data, [e2 / (e2 + 1), 1 / (e2 + 1)], atol=1e-12)


def test_softmax_stable_for_large_gap():
    out = ad.softmax(np.array([3.0, 1003.0])).data
    assert np.all(np.isfinite(out))
    assert out[1] == pytest.approx(1.0)
    assert out[0] < 1e-300 or out[0] == pytest.approx(0.0)


def test_softmax_mask_zeroes_padding():
    out = ad.softmax(np.array([[1.0, 2.0, 3.0]]), mask=np.array([[True, True, False]])).data
    assert out[0, 2] == 0.0
    assert out.sum() == pytest.approx(1.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_softmax_rows_sum_to_one(xs):
    out = ad.softmax(np.array(xs)).data
    assert abs(out.sum() - 1.0) <= 1e-6
    assert np.all(out > 0)


def test_log_softmax_matches_log_of_softmax(rng):
    x = rng.normal(size=(4, 7))
    assert np.allclose(ad.log_softmax(x).data, np.log(ad.softmax(x).data), atol=1e-12)


# -- elementwise ----------------------------------------------------------


def test_elementwise_fixed_points():
    assert ad.elementwise("sigmoid", np.array(0.0)).item() == 0.5
    assert ad.elementwise("tanh", np.array(0.0)).item() == 0.0
    assert ad.elementwise("clip", np.array(5.0), 0.0, 3.0).item() == 3.0


def test_log_of_nonpositive_is_domain_error():
    with pytest.raises(ad.DomainError):
        ad.log(np.array([1.0, 0.0]))
    with pytest.raises(ad.DomainError):
        ad.log(np.array([-2.0]))


def test_sigmoid_extreme_inputs_stay_finite():
    out = ad.sigmoid(np.array([-800.0, 800.0])).data
    assert np.all(np.isfinite(out))
    assert out[0] == pytest.approx(0.0) and out[1] == pytest.approx(1.0)


def test_clip_gradient_convention():
    x = param("x", [-1.0, 0.0, 1.5, 3.0, 4.0])
    ad.backward(ad.sum(ad.clip(x, 0.0, 3.0)))
    assert np.array_equal(x.grad, [0.0, 0.0, 1.0, 0.0, 0.0])


def test_broadcast_only_bias_row():
    ad.add(np.ones((3, 4)), np.ones(4))
    with pytest.raises(ad.ShapeError):
        ad.add(np.ones((3, 4)), np.ones((3, 1)))
    with pytest.raises(ad.ShapeError):
        ad.mul(np.ones((3, 4)), np.ones(3))


def test_unknown_elementwise_kind():
    with pytest.raises(ValueError):
        ad.elementwise("cosh", np.ones(2))


# -- structural -----------------------------------------------------------


def test_concat_values_and_shapes():
    assert np.array_equal(ad.concat([np.array([1.0, 2.0]), np.array([3.0])]).data, [1, 2, 3])
    assert ad.concat([np.ones((2, 3)), np.ones((2, 1))], axis=1).shape == (2, 4)


def test_concat_shape_mismatch():
    with pytest.raises(ad.ShapeError):
        ad.concat([np.ones((2, 3)), np.ones((3, 1))], axis=1)


def test_index_with_repeated_rows_accumulates(rng):
    x = param("x", rng.normal(size=(4, 3)))
    ad.backward(ad.sum(ad.index(x, np.array([0, 0, 2]))))
    assert np.array_equal(x.grad[:, 0], [2.0, 0.0, 1.0, 0.0])


# -- backward -------------------------------------------------------------


def test_backward_sum_gives_ones():
    p = param("p", np.arange(6.0).reshape(2, 3))
    grads = ad.backward(ad.sum(p))
    assert np.array_equal(grads["p"], np.ones((2, 3)))


def test_backward_square():
    x = param("x", 3.0)
    ad.backward(ad.mul(x, x))
    assert x.grad == pytest.approx(6.0)


def test_backward_accumulates_until_reset():
    x = param("x", 3.0)
    ad.backward(ad.mul(x, x))
    ad.backward(ad.mul(x, x))
    assert x.grad == pytest.approx(12.0)
    ad.zero_grad([x])
    assert x.grad is None


def test_backward_rejects_non_scalar():
    with pytest.raises(ad.ShapeError):
        ad.backward(param("p", np.ones(3)))


def test_no_grad_builds_no_graph():
    x = param("x", 2.0)
    with ad.no_grad():
        y = ad.mul(x, x)
    assert not y.requires_grad


def test_shared_subexpression_counts_both_paths():
    x = param("x", 0.7)
    t = ad.tanh(x)
    ad.backward(ad.add(ad.mul(t, t), t))
    th = math.tanh(0.7)
    assert x.grad == pytest.approx((2 * th + 1) * (1 - th**2), rel=1e-12)


def test_deep_chain_does_not_recurse():
    x = param("x", 0.1)
    y = x
    for _ in range(5000):
        y = ad.scale(y, 1.0)
    ad.backward(y)
    assert x.grad == pytest.approx(1.0)


def test_float32_mode_is_global():
    with ad.default_dtype(np.float32):
        p = Params().create("w", (2, 2), np.random.default_rng(0))
        assert p.data.dtype == np.float32
        assert ad.tanh(p).data.dtype == np.float32
    assert ad.get_default_dtype() == np.float64


# -- gradient checks per op -----------------------------------------------


OPS = {
    "add": lambda a, b: ad.add(a, b),
    "sub": lambda a, b: ad.sub(a, b),
    "mul": lambda a, b: ad.mul(a, b),
    "bias_add": lambda a, b: ad.add(a, ad.index(b, 0)),
    "scale": lambda a, b: ad.scale(a, -1.7),
    "div": lambda a, b: ad.div(a, -1.7),
    "tanh": lambda a, b: ad.tanh(a),
    "sigmoid": lambda a, b: ad.sigmoid(a),
    "relu": lambda a, b: ad.relu(a),
    "exp": lambda a, b: ad.exp(a),
    "log": lambda a, b: ad.log(ad.add(ad.mul(a, a), 1.0 + 0 * b.data)),
    "clip": lambda a, b: ad.clip(a, -0.5, 0.5),
    "matmul": lambda a, b: ad.matmul(a, ad.reshape(b, (4, 3))),
    "softmax": lambda a, b: ad.softmax(a, axis=-1),
    "softmax_axis0": lambda a, b: ad.softmax(a, axis=0),
    "log_softmax": lambda a, b: ad.log_softmax(a),
    "concat": lambda a, b: ad.concat([a, b], axis=0),
    "stack": lambda a, b: ad.stack([a, b], axis=1),
    "index": lambda a, b: ad.index(a, (slice(None), 1)),
    "reshape": lambda a, b: ad.reshape(a, (4, 3)),
    "pick": lambda a, b: ad.pick(a, np.array([0, 3, 1])),
    "mean": lambda a, b: ad.mean(ad.mul(a, b)),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences(name):
    rng = np.random.default_rng(7)
    for _ in range(5):
        a = param("a", rng.normal(size=(3, 4)))
        b = param("b", rng.normal(size=(3, 4)))
        if name in ("relu", "clip"):  # keep clear of the kinks
            a.data = np.sign(a.data) * (0.1 + np.abs(a.data))
            if name == "clip":
                a.data[np.abs(np.abs(a.data) - 0.5) < 0.05] += 0.2
        w = rng.normal(size=OPS[name](a, b).shape)

        def f():
            return ad.sum(ad.mul(OPS[name](a, b), w))

        report = grad_check(f, {"a": a, "b": b}, tol=1e-4)
        assert report.passed, str(report)


def test_composite_tanh_mse(rng):
    W, b = param("W", rng.normal(size=(5, 3))), param("b", rng.normal(size=3))
    x, y = rng.normal(size=(4, 5)), rng.normal(size=(4, 3))

    def f():
        d = ad.sub(ad.tanh(ad.add(ad.matmul(x, W), b)), y)
        return ad.mean(ad.mul(d, d))

    assert grad_check(f, {"W": W, "b": b}, tol=1e-4).passed


def test_grad_check_catches_corrupted_backward(monkeypatch, rng):
    W = param("W", rng.normal(size=(3, 2)))
    x = rng.normal(size=(4, 3))
    real_tanh = ad.tanh

    def bad_tanh(t):
        t = ad.as_tensor(t)
        y = np.tanh(t.data)
        return ad._make(y, (t,), lambda g: (g * (1 - y),), "tanh")  # wrong derivative

    monkeypatch.setattr(ad, "tanh", bad_tanh)
    report = grad_check(lambda: ad.sum(ad.tanh(ad.matmul(x, W))), {"W": W}, tol=1e-4)
    monkeypatch.setattr(ad, "tanh", real_tanh)
    assert not report.passed


def test_grad_check_requires_float64():
    p = param("p", [1.0])
    with ad.default_dtype(np.float32):
        with pytest.raises(RuntimeError):
            grad_check(lambda: ad.sum(p), {"p": p})


def test_numerical_gradient_of_quadratic():
    p = param("p", [1.0, -2.0])
    g = numerical_gradient(lambda: ad.sum(ad.mul(p, p)), p)
    assert np.allclose(g, [2.0, -4.0], atol=1e-8)


def test_relative_error_floor():
    assert relative_error(np.array([0.0]), np.array([1e-9])) == pytest.approx(1e-4)
    assert relative_error(np.array([2.0]), np.array([2.0])) == 0.0


def test_graph_evaluation_is_deterministic(rng):
    W = rng.normal(size=(6, 6))
    x = rng.normal(size=(3, 6))
    a = ad.softmax(ad.tanh(ad.matmul(x, W))).data
    b = ad.softmax(ad.tanh(ad.matmul(x, W))).data
    assert a.tobytes() == b.tobytes()
