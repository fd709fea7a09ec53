import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from lesioncap import diffcore as dc
from lesioncap.diffcore import DiffArray, GraphError, ShapeError, grad_check

TOL = dc.GRADCHECK_TOL


def _proj(rng, shape):
    """Random constant used to turn an array-valued op into a scalar."""
    return DiffArray(rng.normal(size=shape))


def conv2d_reference(x, w, b, stride, padding):
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for i in range(n):
        for o in range(f):
            for r in range(ho):
                for s in range(wo):
                    acc = b[o] if b is not None else 0.0
                    for ci in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[i, ci, r * stride + u, s * stride + v] * w[o, ci, u, v]
                    out[i, o, r, s] = acc
    return out


def test_relu_forward():
    assert dc.relu(DiffArray([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]


def test_square_derivative():
    x = DiffArray(3.0, requires_grad=True)
    y = x * x
    y.backward()
    assert x.grad == pytest.approx(6.0)


def test_sum_of_ones_grad():
    x = DiffArray(np.ones((2, 2)), requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 2)))


def test_detached_input_has_no_grad():
    x = DiffArray(np.ones(3), requires_grad=True)
    z = DiffArray(np.arange(3.0), requires_grad=True)
    (z * 2.0).sum().backward()
    assert x.grad is None


def test_softmax_cross_entropy_identity():
    rng = np.random.default_rng(0)
    logits = DiffArray(rng.normal(size=(1, 5)), requires_grad=True)
    dc.cross_entropy(logits, [3]).backward()
    p = np.exp(logits.data - logits.data.max())
    p /= p.sum()
    onehot = np.eye(5)[[3]]
    np.testing.assert_allclose(logits.grad, p - onehot, atol=1e-12)


def test_backward_requires_scalar():
    x = DiffArray(np.ones(3), requires_grad=True)
    with pytest.raises(GraphError):
        (x * 2.0).backward()


def test_double_backward_raises_until_reset():
    x = DiffArray(np.ones(3), requires_grad=True)
    y = (x * x).sum()
    y.backward()
    with pytest.raises(GraphError):
        y.backward()
    y.zero_grad()
    y.backward()
    np.testing.assert_allclose(x.grad, 2 * np.ones(3))


def test_shared_subexpression_accumulates():
    x = DiffArray(np.array([1.0, 2.0]), requires_grad=True)
    y = x * x
    (y + y).sum().backward()
    np.testing.assert_allclose(x.grad, 4 * x.data)


def test_shape_error_names_op_and_shapes():
    with pytest.raises(ShapeError) as err:
        dc.matmul(DiffArray(np.ones((2, 3))), DiffArray(np.ones((4, 2))))
    assert "matmul" in str(err.value) and "(2, 3)" in str(err.value) and "(4, 2)" in str(err.value)


def test_unsupported_broadcast_rejected():
    with pytest.raises(ShapeError):
        dc.add(DiffArray(np.ones((3, 1))), DiffArray(np.ones((1, 4))))
    with pytest.raises(ShapeError):
        dc.mul(DiffArray(np.ones((2, 3, 4))), DiffArray(np.ones((2, 4))))


def test_conv2d_matches_loop_reference():
    rng = np.random.default_rng(1)
    for stride, padding in [(1, 0), (1, 1), (2, 1), (2, 0)]:
        x = rng.normal(size=(2, 3, 6, 7))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        got = dc.conv2d(DiffArray(x), DiffArray(w), DiffArray(b), stride=stride, padding=padding).data
        np.testing.assert_allclose(got, conv2d_reference(x, w, b, stride, padding), atol=1e-10)


def test_conv2d_gradcheck_spec_example():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(1, 3, 5, 5))
    w = DiffArray(rng.normal(size=(2, 3, 3, 3)))
    r = _proj(rng, (1, 2, 5, 5))
    rep = grad_check(lambda a: (dc.conv2d(a, w, padding=1) * r).sum(), x, h=1e-5)
    assert rep.passed and rep.max_rel_error < 1e-4


# (name, builder(rng, shape) -> f(a), input shapes)
def primitive_cases():
    def unary(fn):
        def build(rng, shape):
            r = _proj(rng, fn(DiffArray(np.ones(shape))).shape)
            return lambda a: (fn(a) * r).sum()
        return build

    def binary(fn, other_shape):
        def build(rng, shape):
            other = DiffArray(rng.normal(size=other_shape(shape)))
            r = _proj(rng, fn(DiffArray(np.ones(shape)), other).shape)
            return lambda a: (fn(a, other) * r).sum()
        return build

    def binary_rhs(fn, lhs_shape):
        def build(rng, shape):
            other = DiffArray(rng.normal(size=lhs_shape(shape)))
            r = _proj(rng, fn(other, DiffArray(np.ones(shape))).shape)
            return lambda a: (fn(other, a) * r).sum()
        return build

    shapes3 = [(4,), (2, 3), (2, 3, 4)]
    img_shapes = [(1, 2, 4, 4), (2, 3, 4, 6), (1, 1, 6, 6)]
    cases = [
        ("add", binary(dc.add, lambda s: s), shapes3),
        ("add_bias", binary(dc.add, lambda s: s[-1:]), shapes3),
        ("mul", binary(dc.mul, lambda s: s), shapes3),
        ("broadcast_mul_gate", binary(dc.broadcast_mul, lambda s: s[:2] + (1, 1)), img_shapes),
        ("broadcast_mul_gate_rhs", binary_rhs(dc.broadcast_mul, lambda s: s[:2] + (4, 4)),
         [(1, 2, 1, 1), (2, 3, 1, 1), (1, 1, 1, 1)]),
        ("matmul_lhs", binary(dc.matmul, lambda s: (s[-1], 3)), [(2, 4), (3, 2, 5), (2, 2, 3, 4)]),
        ("matmul_rhs_shared", binary_rhs(dc.matmul, lambda s: (2, 3, s[0])), [(4, 2), (3, 5), (1, 1)]),
        ("matmul_rhs_batched", binary_rhs(dc.matmul, lambda s: s[:-2] + (3, s[-2])),
         [(2, 4, 2), (1, 3, 5), (2, 2, 3, 4)]),
        ("relu", unary(dc.relu), shapes3),
        ("sigmoid", unary(dc.sigmoid), shapes3),
        ("softmax_last", unary(lambda a: dc.softmax(a, -1)), shapes3),
        ("softmax_axis0", unary(lambda a: dc.softmax(a, 0)), [(3,), (3, 2), (2, 2, 3)]),
        ("layer_norm", unary(lambda a: dc.layer_norm(a, -1)), [(5,), (3, 4), (2, 3, 6)]),
        ("reshape", unary(lambda a: dc.reshape(a, (-1,))), shapes3),
        ("transpose", unary(lambda a: dc.transpose(a, None)), shapes3),
        ("reduce_mean", unary(lambda a: dc.reduce_mean(a, axis=-1, keepdims=True)), shapes3),
        ("reduce_mean_all", unary(lambda a: dc.reduce_mean(a)), shapes3),
        ("reduce_sum", unary(lambda a: dc.reduce_sum(a, axis=0)), shapes3),
        ("reduce_max", unary(lambda a: dc.reduce_max(a, axis=-1, keepdims=True)), shapes3),
        ("concat", binary(lambda a, b: dc.concat([a, b], axis=-1), lambda s: s), shapes3),
        ("conv2d", binary(lambda a, w: dc.conv2d(a, w, padding=1), lambda s: (2, s[1], 3, 3)), img_shapes),
        ("conv2d_stride2", binary(lambda a, w: dc.conv2d(a, w, stride=2, padding=1),
                                  lambda s: (3, s[1], 3, 3)), img_shapes),
        ("conv2d_weight", binary_rhs(lambda x, w: dc.conv2d(x, w, padding=1), lambda s: (2, s[1], 5, 5)),
         [(2, 1, 3, 3), (1, 3, 3, 3), (3, 2, 1, 1)]),
        ("max_pool2d", unary(lambda a: dc.max_pool2d(a, 2)), img_shapes),
        ("max_pool2d_global", unary(lambda a: dc.max_pool2d(a)), img_shapes),
        ("avg_pool2d", unary(lambda a: dc.avg_pool2d(a, 2)), img_shapes),
        ("avg_pool2d_global", unary(lambda a: dc.avg_pool2d(a)), img_shapes),
    ]
    return cases


@pytest.mark.parametrize("name,build,shapes", primitive_cases(), ids=[c[0] for c in primitive_cases()])
def test_primitive_gradcheck(name, build, shapes):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for shape in shapes:
        f = build(rng, shape)
        rep = grad_check(f, rng.normal(size=shape))
        assert rep.passed, (name, shape, rep)


@pytest.mark.parametrize("shape", [(6, 3), (4, 5), (3, 7)])
def test_embedding_gradcheck(shape):
    rng = np.random.default_rng(3)
    ids = np.array([[0, 2, 1], [1, 1, shape[0] - 1]])
    r = _proj(rng, ids.shape + (shape[1],))
    rep = grad_check(lambda t: (dc.embedding_lookup(t, ids) * r).sum(), rng.normal(size=shape))
    assert rep.passed, rep


@pytest.mark.parametrize("shape", [(1, 5), (4, 5), (3, 2)])
def test_cross_entropy_gradcheck(shape):
    rng = np.random.default_rng(4)
    target = rng.integers(0, shape[1], size=shape[0])
    rep = grad_check(lambda a: dc.cross_entropy(a, target), rng.normal(size=shape))
    assert rep.passed, rep


def test_cross_entropy_ignore_index():
    rng = np.random.default_rng(5)
    target = np.array([1, 0, 2, 0])
    x = rng.normal(size=(4, 3))
    full = dc.cross_entropy(DiffArray(x[[0, 2]]), target[[0, 2]]).item()
    assert dc.cross_entropy(DiffArray(x), target, ignore_index=0).item() == pytest.approx(full)
    rep = grad_check(lambda a: dc.cross_entropy(a, target, ignore_index=0), x)
    assert rep.passed


def test_gradcheck_square_sum():
    rng = np.random.default_rng(6)
    rep = grad_check(lambda a: (a * a).sum(), rng.normal(size=8), tol=1e-6)
    assert rep.passed


def test_gradcheck_catches_wrong_backward():
    def bad_double(a):
        return dc.custom_op(2 * a.data, (a,), lambda g: (4 * g,), "bad_double")
    rep = grad_check(lambda a: bad_double(a).sum(), np.arange(4.0))
    assert not rep.passed
    assert rep.max_rel_error == pytest.approx(0.5)


def test_gradcheck_non_finite_reports_failure():
    def blowup(a):
        return dc.custom_op(a.data * np.inf, (a,), lambda g: (g * np.inf,), "blowup")
    rep = grad_check(lambda a: blowup(a).sum(), np.ones(3))
    assert not rep.passed and "non-finite" in rep.message


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=5),
                  elements=st.floats(-1e3, 1e3)))
def test_softmax_sums_to_one(x):
    y = dc.softmax(DiffArray(x), axis=-1).data
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, st.sampled_from([(2, 3, 4), (6, 4), (24,)]), elements=st.floats(-10, 10)))
def test_reshape_roundtrip_identity(x):
    a = DiffArray(x, requires_grad=True)
    back = dc.reshape(dc.reshape(a, (4, -1)), x.shape)
    np.testing.assert_array_equal(back.data, x)
    (back * DiffArray(np.arange(x.size, dtype=float).reshape(x.shape))).sum().backward()
    np.testing.assert_array_equal(a.grad, np.arange(x.size, dtype=float).reshape(x.shape))


def test_conv2d_reference_fuzz():
    rng = np.random.default_rng(7)
    for _ in range(5):
        c, f, k = rng.integers(1, 4), rng.integers(1, 4), int(rng.choice([1, 3, 5]))
        x = rng.normal(size=(1, c, 7, 6))
        w = rng.normal(size=(f, c, k, k))
        got = dc.conv2d(DiffArray(x), DiffArray(w), padding=k // 2).data
        np.testing.assert_allclose(got, conv2d_reference(x, w, None, 1, k // 2), atol=1e-10)
