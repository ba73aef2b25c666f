import itertools
import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from paratranscnn import ops
from paratranscnn.tensor import Parameter, Tensor, backward, get_tape, is_grad_enabled, no_grad, reset_tape


def test_dtype_and_storage():
    t = Tensor([1, 2, 3])
    assert t.dtype == np.float32
    assert t.data.flags.c_contiguous
    assert Tensor(np.zeros(2), dtype=np.float64).dtype == np.float64
    assert Tensor(np.arange(6.0).reshape(2, 3).T).data.flags.c_contiguous


def test_zero_dim_stays_scalar():
    assert Tensor(np.float64(3.0)).shape == ()
    x = Tensor(np.ones(4), requires_grad=True)
    s = ops.sum(x, axis=0)
    assert s.shape == ()


def test_grad_of_sum_is_ones():
    x = Tensor(np.random.default_rng(0).standard_normal((2, 3, 4)), requires_grad=True)
    backward(ops.sum(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))


def test_grad_of_sum_of_squares():
    x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    backward(ops.sum(x * x))
    np.testing.assert_array_equal(x.grad, [2.0, -4.0])


def test_fan_out_is_summed():
    x = Tensor(np.array([3.0]), requires_grad=True)
    y = x * 2.0
    backward(ops.sum(y + y * y))
    # d/dx (2x + 4x^2) = 2 + 8x
    np.testing.assert_allclose(x.grad, [2.0 + 24.0])


def test_backward_errors():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        backward(x * 2.0)
    with pytest.raises(ValueError):
        backward(ops.sum(Tensor(np.ones(3))))
    y = ops.sum(x)
    reset_tape()
    with pytest.raises(ValueError, match="tape"):
        backward(y)


def test_tape_reset_after_backward_and_retained_on_request():
    x = Tensor(np.ones(2), requires_grad=True)
    backward(ops.sum(x * x))
    assert len(get_tape()) == 0
    loss = ops.sum(x * x)
    backward(loss, retain_tape=True)
    assert len(get_tape()) > 0


def test_grads_accumulate_across_backward_calls():
    x = Tensor(np.ones(2), requires_grad=True)
    backward(ops.sum(x))
    backward(ops.sum(x))
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])
    x.zero_grad()
    assert x.grad is None


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        assert not is_grad_enabled()
        y = x * 3.0
    assert is_grad_enabled()
    assert len(get_tape()) == 0
    assert y.node_id is None


def test_constant_never_on_tape():
    c = Tensor(np.ones(3))
    y = c * 2.0
    assert len(get_tape()) == 0 and y.node_id is None


def test_parameter_is_leaf_with_name():
    p = Parameter(np.zeros(3), name="w")
    assert p.requires_grad and p.is_leaf and p.name == "w"


def test_tapes_are_thread_local():
    x = Tensor(np.ones(2), requires_grad=True)
    _ = x * 2.0
    seen = []

    def worker():
        seen.append(len(get_tape()))

    t = threading.Thread(target=worker)
    t.start()
    t.join()
    assert seen == [0]
    assert len(get_tape()) == 1


# Random scalar DAGs with shared subexpressions against a path-enumeration oracle.

_OPS = {
    "add": (lambda a, b: a + b, lambda a, b: (1.0, 1.0)),
    "sub": (lambda a, b: a - b, lambda a, b: (1.0, -1.0)),
    "mul": (lambda a, b: a * b, lambda a, b: (b, a)),
}

dag = st.integers(2, 10).flatmap(lambda n: st.tuples(
    st.lists(st.floats(-2, 2, allow_nan=False), min_size=2, max_size=2),
    st.lists(st.tuples(st.sampled_from(sorted(_OPS)), st.integers(0, 10 ** 6), st.integers(0, 10 ** 6)),
             min_size=n - 2, max_size=n - 2),
))


@settings(max_examples=150, deadline=None)
@given(dag)
def test_dag_gradient_equals_sum_over_paths(graph):
    inputs, nodes = graph
    values = list(inputs)
    edges = []  # per node: list of (parent, local derivative)
    tensors = [Tensor(np.array([v]), requires_grad=True, dtype=np.float64) for v in inputs]
    for i, (op, ra, rb) in enumerate(nodes, start=2):
        a, b = ra % i, rb % i
        f, df = _OPS[op]
        values.append(f(values[a], values[b]))
        da, db = df(values[a], values[b])
        edges.append([(a, da), (b, db)])
        tensors.append({"add": ops.add, "sub": ops.sub, "mul": ops.mul}[op](tensors[a], tensors[b]))
    out = len(values) - 1
    if out < 2:
        return

    def paths(node, target):
        if node == target:
            return 1.0
        if node < 2:
            return 0.0
        return sum(d * paths(p, target) for p, d in edges[node - 2])

    backward(ops.sum(tensors[out]))
    for k in range(2):
        expected = paths(out, k)
        got = 0.0 if tensors[k].grad is None else tensors[k].grad[0]
        assert got == pytest.approx(expected, rel=1e-12, abs=1e-12)
