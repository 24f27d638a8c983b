import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from noderf import autograd as ag
from noderf.autograd import Tensor


def test_matmul_identity(rng):
    A = rng.normal(size=(2, 2))
    assert np.array_equal(ag.matmul(np.eye(2), A).data, A)


def test_softplus_zero_is_ln2():
    assert ag.softplus(Tensor(0.0)).item() == pytest.approx(np.log(2), abs=1e-15)


def test_softplus_is_stable_for_large_inputs():
    out = ag.softplus(Tensor(np.array([-800.0, 800.0]))).data
    assert np.all(np.isfinite(out))
    assert out[1] == pytest.approx(800.0)


def test_concat_last_axis():
    assert ag.concat([Tensor([1.0, 2.0]), Tensor([3.0])]).data.tolist() == [1, 2, 3]


def test_forward_op_registry_covers_required_kinds():
    required = ["matmul", "add", "sub", "mul", "scale", "concat", "slice", "sum", "mean", "relu", "tanh",
                "sigmoid", "softplus", "exp", "square", "abs", "l2-squared"]
    for kind in required:
        assert kind in ag.OP_KINDS
    out = ag.forward_op("add", [Tensor([1.0]), Tensor([2.0])])
    assert out.data.tolist() == [3.0]
    with pytest.raises(ValueError):
        ag.forward_op("nope", [])


def test_shape_mismatch_names_op_and_shapes():
    with pytest.raises(ag.ShapeError, match=r"add.*\(3,\).*\(2,\)"):
        ag.add(Tensor(np.ones(3)), Tensor(np.ones(2)))
    with pytest.raises(ag.ShapeError, match="matmul"):
        ag.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_only_leading_axis_broadcast():
    out = ag.add(Tensor(np.ones((4, 3))), Tensor(np.arange(3.0)))
    assert out.shape == (4, 3)
    with pytest.raises(ag.ShapeError):
        ag.add(Tensor(np.ones((4, 3))), Tensor(np.ones((4, 1))))


def test_backward_sum_of_squares():
    x = ag.parameter(np.array([1.0, 2.0, 3.0]))
    g = ag.backward(ag.sum(ag.square(x)))
    assert g[x].data.tolist() == [2.0, 4.0, 6.0]


def test_backward_mean():
    x = ag.parameter(np.ones(4))
    g = ag.backward(ag.mean(x))
    assert g[x].data.tolist() == [0.25] * 4


def test_backward_rejects_non_scalar_and_detached():
    x = ag.parameter(np.ones(3))
    with pytest.raises(ag.GraphError):
        ag.backward(ag.square(x))
    with pytest.raises(ag.GraphError):
        ag.backward(Tensor(1.0))


def test_backward_resets_graph():
    x = ag.parameter(np.ones(3))
    ag.backward(ag.sum(ag.square(x)))
    assert len(ag.active_graph()) == 0


def test_unreached_params_get_zero_gradients():
    x, y = ag.parameter(np.ones(2)), ag.parameter(np.ones(3))
    g = ag.backward(ag.sum(x), [x, y])
    assert np.array_equal(g[y].data, np.zeros(3))


def test_no_grad_records_nothing():
    x = ag.parameter(np.ones(3))
    with ag.no_grad():
        y = ag.square(x)
    assert y.node is None and len(ag.active_graph()) == 0


def test_finite_diff_scalar_square():
    x = ag.parameter(np.array(3.0))
    assert ag.finite_diff_check(lambda: ag.square(x), [x]) < 1e-9


def test_finite_diff_two_layer_tanh_mlp(rng):
    W1, b1 = ag.parameter(rng.normal(size=(5, 3))), ag.parameter(rng.normal(size=5))
    W2, b2 = ag.parameter(rng.normal(size=(1, 5))), ag.parameter(rng.normal(size=1))
    x = rng.normal(size=(4, 3))

    def f():
        h = ag.tanh(ag.add(ag.matmul(Tensor(x), ag.transpose(W1)), b1))
        return ag.sum(ag.add(ag.matmul(h, ag.transpose(W2)), b2))

    assert ag.finite_diff_check(f, [W1, b1, W2, b2]) < 1e-6


@pytest.mark.parametrize("op", ["relu", "tanh", "sigmoid", "softplus", "exp", "sin", "cos", "square", "abs", "log"])
def test_unary_gradients(op, rng):
    data = rng.uniform(0.2, 1.5, size=6) * rng.choice([-1, 1], size=6)
    if op == "log":
        data = np.abs(data)
    x = ag.parameter(data)
    fn = getattr(ag, op)
    assert ag.finite_diff_check(lambda: ag.sum(ag.mul(fn(x), np.arange(1.0, 7.0))), [x]) < 1e-7


def test_structural_op_gradients(rng):
    a = ag.parameter(rng.normal(size=(3, 4)))
    b = ag.parameter(rng.normal(size=(3, 2)))
    v = ag.parameter(rng.normal(size=4))

    def f():
        c = ag.concat([a, b])
        s = ag.slice_last(c, 1, 5)
        r = ag.reshape(ag.cumsum(s, exclusive=True), (12,))
        t = ag.take(ag.transpose(a), np.array([0, 2, 2, 3]))
        e = ag.expand_last(ag.sum(a, axis=1), 2)
        m = ag.minimum(ag.div(a, ag.add(ag.abs(v), 1.0)), 0.3)
        return ag.add(ag.add(ag.add(ag.l2sq(r), ag.sum(ag.mul(t, t))), ag.mean(e)), ag.sum(m))

    assert ag.finite_diff_check(f, [a, b, v]) < 1e-6


def test_graph_replay_is_bit_identical(rng):
    W = ag.parameter(rng.normal(size=(4, 4)))
    x = rng.normal(size=(8, 4))

    def run():
        loss = ag.sum(ag.tanh(ag.matmul(Tensor(x), W)))
        return loss.item(), ag.backward(loss)[W].data.copy()

    (l1, g1), (l2, g2) = run(), run()
    assert l1 == l2 and np.array_equal(g1, g2)


def test_graphs_are_thread_local():
    seen = {}

    def worker():
        seen["len"] = len(ag.active_graph())

    x = ag.parameter(np.ones(2))
    ag.square(x)
    t = threading.Thread(target=worker)
    t.start()
    t.join()
    assert seen["len"] == 0 and len(ag.active_graph()) > 0


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 6)),
              elements=st.floats(-1e3, 1e3)), st.data())
def test_concat_then_slice_is_identity(x, data):
    k = data.draw(st.integers(1, x.shape[1] - 1))
    a, b = Tensor(x[:, :k]), Tensor(x[:, k:])
    c = ag.concat([a, b])
    assert np.array_equal(ag.slice_last(c, 0, k).data, a.data)
    assert np.array_equal(ag.slice_last(c, k, x.shape[1]).data, b.data)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, 5, elements=st.floats(-50, 50)))
def test_guarded_ops_stay_finite(x):
    t = Tensor(x)
    for out in (ag.softplus(t), ag.sigmoid(t), ag.log(ag.abs(t)), ag.div(t, ag.add(ag.abs(t), 1.0))):
        assert np.all(np.isfinite(out.data))
