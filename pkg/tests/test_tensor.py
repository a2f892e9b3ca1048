import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sadg import tensor as T
from sadg.tensor import Tensor

from gradcheck import REL_TOL, check_gradients

N_INSTANCES = 20


def away_from_zero(rng, shape, gap=0.1):
    x = rng.standard_normal(shape)
    return np.sign(x) * (gap + np.abs(x))


def weighted(out, r):
    return T.tsum(T.mul(out, r))


def _r(rng, shape):
    return rng.standard_normal(shape)


# (name, builder(rng) -> (build_fn, arrays))
def _unary(op, domain=lambda rng, s: rng.standard_normal(s)):
    def make(rng):
        shape = tuple(rng.integers(1, 4, size=2))
        x = domain(rng, shape)
        r = _r(rng, shape)
        return (lambda a: weighted(op(a), r)), [x]
    return make


def _binary(op, broadcast=False, positive_b=False):
    def make(rng):
        shape = tuple(rng.integers(1, 4, size=2))
        bshape = (1, shape[1]) if broadcast else shape
        a = rng.standard_normal(shape)
        b = rng.standard_normal(bshape)
        if positive_b:
            b = 0.5 + np.abs(b)
        r = _r(rng, shape)
        return (lambda x, y: weighted(op(x, y), r)), [a, b]
    return make


def _reduce(op):
    def make(rng):
        x = rng.standard_normal((2, 3, 4))
        axis = [None, 0, 1, 2, (1, 2)][int(rng.integers(0, 5))]
        keep = bool(rng.integers(0, 2))
        out_shape = np.sum(x, axis=axis, keepdims=keep).shape
        r = _r(rng, out_shape)
        return (lambda a: weighted(op(a, axis=axis, keepdims=keep), r)), [x]
    return make


def _conv(rng):
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 2))
    x = rng.standard_normal((2, 2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    out_shape = T.conv2d(x, w, b, stride=stride, padding=pad).shape
    r = _r(rng, out_shape)
    return (lambda a, k, c: weighted(T.conv2d(a, k, c, stride=stride, padding=pad), r)), [x, w, b]


def _pool(rng):
    # distinct, well separated values so no window has a near-tie
    x = rng.permutation(2 * 2 * 4 * 4).reshape(2, 2, 4, 4) * 0.1
    r = _r(rng, (2, 2, 2, 2))
    return (lambda a: weighted(T.max_pool2d(a, 2), r)), [x]


def _gap(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    r = _r(rng, (2, 3))
    return (lambda a: weighted(T.global_avg_pool(a), r)), [x]


def _matmul(rng):
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    r = _r(rng, (3, 2))
    return (lambda x, y: weighted(T.matmul(x, y), r)), [a, b]


def _dense(rng):
    x, w, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2)), rng.standard_normal(2)
    r = _r(rng, (3, 2))
    return (lambda a, k, c: weighted(T.dense(a, k, c), r)), [x, w, b]


def _concat(rng):
    a, b = rng.standard_normal((2, 3)), rng.standard_normal((1, 3))
    r = _r(rng, (3, 3))
    return (lambda x, y: weighted(T.concat([x, y], axis=0), r)), [a, b]


def _reshape(rng):
    x = rng.standard_normal((2, 6))
    r = _r(rng, (3, 4))
    return (lambda a: weighted(T.reshape(a, (3, 4)), r)), [x]


def _transpose(rng):
    x = rng.standard_normal((2, 3))
    r = _r(rng, (3, 2))
    return (lambda a: weighted(T.transpose(a), r)), [x]


def _take(rng):
    x = rng.standard_normal((4, 3))
    idx = rng.integers(0, 4, size=5)  # repeats exercise accumulation
    r = _r(rng, (5, 3))
    return (lambda a: weighted(T.take(a, idx), r)), [x]


def _softmax(rng):
    x = rng.standard_normal((3, 4)) * 2
    r = _r(rng, (3, 4))
    return (lambda a: weighted(T.softmax(a, axis=1), r)), [x]


def _log_softmax(rng):
    x = rng.standard_normal((3, 4)) * 2
    r = _r(rng, (3, 4))
    return (lambda a: weighted(T.log_softmax(a, axis=1), r)), [x]


def _l2n(rng):
    x = rng.standard_normal((3, 4))
    r = _r(rng, (3, 4))
    return (lambda a: weighted(T.l2_normalize(a), r)), [x]


PRIMITIVES = {
    "add": _binary(T.add),
    "add_broadcast": _binary(T.add, broadcast=True),
    "sub": _binary(T.sub, broadcast=True),
    "mul": _binary(T.mul),
    "mul_broadcast": _binary(T.mul, broadcast=True),
    "div": _binary(T.div, positive_b=True),
    "neg": _unary(T.neg),
    "square": _unary(T.square),
    "sqrt": _unary(T.sqrt, lambda rng, s: 0.2 + np.abs(rng.standard_normal(s))),
    "exp": _unary(T.exp),
    "log": _unary(T.log, lambda rng, s: 0.2 + np.abs(rng.standard_normal(s))),
    "relu": _unary(T.relu, away_from_zero),
    "clamp_min": _unary(lambda a: T.clamp_min(a, 0.0), away_from_zero),
    "sum": _reduce(T.tsum),
    "mean": _reduce(T.mean),
    "matmul": _matmul,
    "dense": _dense,
    "conv2d": _conv,
    "max_pool2d": _pool,
    "global_avg_pool": _gap,
    "softmax": _softmax,
    "log_softmax": _log_softmax,
    "l2_normalize": _l2n,
    "concat": _concat,
    "reshape": _reshape,
    "transpose": _transpose,
    "take": _take,
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_matches_finite_differences(name):
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    worst = 0.0
    for _ in range(N_INSTANCES):
        build, arrays = PRIMITIVES[name](rng)
        worst = max(worst, check_gradients(build, arrays))
    assert worst <= REL_TOL, f"{name}: relative error {worst:.2e}"


def test_composite_graph_matches_finite_differences():
    rng = np.random.default_rng(7)
    for _ in range(N_INSTANCES):
        x = rng.standard_normal((2, 1, 4, 4))
        w = rng.standard_normal((2, 1, 3, 3))
        v = rng.standard_normal((2, 3))

        def build(a, k, m):
            h = T.max_pool2d(T.relu(T.conv2d(a, k, padding=1)), 2)
            f = T.dense(T.global_avg_pool(h), m)
            return T.mean(T.log_softmax(T.mul(f, f), axis=1))

        assert check_gradients(build, [x, w, v]) <= REL_TOL


# -- spec examples --------------------------------------------------------

def test_relu_and_softmax_examples():
    assert T.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]
    assert np.allclose(T.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5], atol=0, rtol=1e-15)


def test_conv_shape():
    rng = np.random.default_rng(0)
    out = T.conv2d(rng.standard_normal((1, 1, 8, 8)), rng.standard_normal((4, 1, 3, 3)), stride=1, padding=1)
    assert out.shape == (1, 4, 8, 8)


def test_conv_shape_mismatch_names_op_and_shapes():
    with pytest.raises(T.ShapeError, match=r"conv2d.*\(1, 2, 8, 8\).*\(4, 1, 3, 3\)"):
        T.conv2d(np.zeros((1, 2, 8, 8)), np.zeros((4, 1, 3, 3)))
    with pytest.raises(T.ShapeError, match="matmul"):
        T.matmul(np.zeros((2, 3)), np.zeros((2, 3)))
    with pytest.raises(T.ShapeError, match="add"):
        T.add(np.zeros(3), np.zeros(4))


def test_backward_examples():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    T.tsum(x).backward()
    assert x.grad.tolist() == [1.0, 1.0, 1.0]
    y = Tensor([1.0, 2.0], requires_grad=True)
    T.tsum(T.mul(y, y)).backward()
    assert y.grad.tolist() == [2.0, 4.0]


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        T.mul(x, 2.0).backward()


def test_graph_recorded_only_when_needed():
    a = Tensor([1.0, 2.0])
    assert T.add(a, a)._backward is None
    b = Tensor([1.0, 2.0], requires_grad=True)
    assert T.add(a, b).requires_grad
    with T.no_grad():
        assert not T.add(b, b).requires_grad


def test_shared_node_visited_once():
    x = Tensor([1.5, -2.0], requires_grad=True)
    h = T.square(x)  # used twice below
    T.tsum(T.add(h, h)).backward()
    assert np.array_equal(x.grad, 4 * x.data)


# -- gradient reversal ---------------------------------------------------

def test_grl_forward_is_identity():
    x = Tensor([3.5, -1.0], requires_grad=True)
    out = T.grad_reverse(x, 1.0)
    assert out.data.tolist() == [3.5, -1.0]


@pytest.mark.parametrize("upstream, lam, expected", [
    ([1.0, 1.0], 1.0, [-1.0, -1.0]),
    ([2.0, -4.0], 0.5, [-1.0, 2.0]),
])
def test_grl_backward_examples(upstream, lam, expected):
    x = Tensor([3.5, -1.0], requires_grad=True)
    T.grad_reverse(x, lam).backward(np.array(upstream))
    assert x.grad.tolist() == expected


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=16),
       st.floats(0, 10), st.integers(0, 2**31 - 1))
def test_grl_exact_property(values, lam, seed):
    x = Tensor(values, requires_grad=True)
    out = T.grad_reverse(x, lam)
    assert np.array_equal(out.data, x.data)
    up = np.random.default_rng(seed).standard_normal(len(values))
    out.backward(up)
    assert np.array_equal(x.grad, -lam * up)


def test_grl_rejects_negative_lambda():
    with pytest.raises(ValueError):
        T.grad_reverse(Tensor([1.0]), -0.1)


# -- properties -----------------------------------------------------------

@settings(max_examples=60, deadline=None)
@given(st.integers(1, 5), st.integers(1, 6), st.floats(0.1, 50), st.integers(0, 2**31 - 1))
def test_softmax_rows_sum_to_one_and_positive(rows, cols, scale, seed):
    x = np.random.default_rng(seed).standard_normal((rows, cols)) * scale
    p = T.softmax(Tensor(x), axis=1).data
    assert np.all(np.abs(p.sum(axis=1) - 1) <= 1e-9)
    assert np.all(p > 0)


def test_gradient_accumulates_across_terms():
    rng = np.random.default_rng(3)
    for _ in range(20):
        data = rng.standard_normal((3, 4))

        def f(t):
            return T.tsum(T.mul(T.exp(t), 0.3))

        def g(t):
            return T.mean(T.log_softmax(t, axis=1))

        x = Tensor(data, requires_grad=True)
        T.add(f(x), g(x)).backward()
        joint = x.grad.copy()
        x1 = Tensor(data, requires_grad=True)
        f(x1).backward()
        g(x1).backward()  # second backward accumulates into the leaf
        assert np.max(np.abs(joint - x1.grad)) <= 1e-12


def test_values_and_grad_are_finite_after_ops():
    x = Tensor(np.array([[1000.0, -1000.0, 0.0]]), requires_grad=True)
    loss = T.mean(T.log_softmax(x, axis=1))
    loss.backward()
    assert np.isfinite(loss.data).all() and np.isfinite(x.grad).all()
    assert x.grad.shape == x.shape and x.values.size == int(np.prod(x.shape))
