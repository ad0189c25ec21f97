import math
import zlib

import numpy as np
import pytest

from hieraudio import autodiff as ad
from hieraudio.autodiff import Tensor


def rel_err(a, b, floor=1e-10):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def check_grads(build, arrays, tol=1e-6, step=1e-5):
    """Compare backward() against central differences for every input array."""
    leaves = [Tensor(a.astype(np.float64), requires_grad=True) for a in arrays]
    out = build(*leaves)
    # random projection makes non-scalar outputs scalar without symmetries
    proj = np.random.default_rng(123).normal(size=out.shape)
    loss = (out * proj).sum()
    grads = ad.backward(loss, leaves)
    for k, a in enumerate(arrays):
        def f(x, k=k):
            args = [Tensor(x) if j == k else Tensor(arrays[j].astype(np.float64))
                    for j in range(len(arrays))]
            return float((build(*args).data * proj).sum())
        fd = ad.finite_difference_grad(f, a, step)
        err = np.max(np.abs(grads[k] - fd)) / max(np.max(np.abs(fd)), 1e-8)
        assert err < tol, f"input {k}: relative error {err:.3g}"


# --- examples ----------------------------------------------------------------


def test_matmul_shape():
    out = ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 4))))
    assert out.shape == (2, 4)


def test_matmul_shape_mismatch_names_op_and_shapes():
    with pytest.raises(ad.ShapeError) as info:
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 4))))
    msg = str(info.value)
    assert "matmul" in msg and "(2, 3)" in msg and "(4, 4)" in msg


def test_softmax_of_zeros_is_uniform():
    np.testing.assert_array_equal(ad.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_layer_norm_constant_vector_is_zero():
    out = ad.layer_norm(Tensor(np.full((5,), 3.25)))
    assert np.all(np.isfinite(out.data))
    np.testing.assert_array_equal(out.data, np.zeros(5))


def test_square_grad():
    x = Tensor(3.0, requires_grad=True, dtype=np.float64)
    ad.backward(x * x)
    assert x.grad == pytest.approx(6.0)


def test_sum_of_softmax_has_zero_grad():
    x = Tensor(np.random.default_rng(0).normal(size=7), requires_grad=True)
    ad.backward(ad.softmax(x).sum())
    np.testing.assert_allclose(x.grad, 0.0, atol=1e-7)


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ad.GraphError):
        ad.backward(x * 2.0)


def test_unreachable_leaf_gets_zero_grad():
    x = Tensor(np.ones(3), requires_grad=True)
    y = Tensor(np.ones((2, 2)), requires_grad=True)
    gx, gy = ad.backward((x * 2.0).sum(), [x, y])
    np.testing.assert_array_equal(gx, 2.0)
    np.testing.assert_array_equal(gy, np.zeros((2, 2)))


def test_graph_consumed_once():
    x = Tensor(np.ones(3), requires_grad=True)
    loss = (x * x).sum()
    ad.backward(loss)
    with pytest.raises(ad.GraphError):
        ad.backward(loss)


def test_shared_subexpression_accumulates():
    x = Tensor(np.array([1.5, -2.0]), requires_grad=True, dtype=np.float64)
    y = x * x
    ad.backward((y + y * x).sum())
    np.testing.assert_allclose(x.grad, 2 * x.data + 3 * x.data ** 2)


def test_fd_square_and_constant():
    g = ad.finite_difference_grad(lambda x: float(x[0] ** 2), np.array([3.0]), 1e-5)
    assert abs(g[0] - 6.0) < 1e-8
    g = ad.finite_difference_grad(lambda x: 4.2, np.random.default_rng(1).normal(size=(3, 2)))
    np.testing.assert_array_equal(g, 0.0)


def test_fd_rejects_non_finite():
    with pytest.raises(FloatingPointError):
        ad.finite_difference_grad(lambda x: float(np.log(x[0])), np.array([0.0]), 1e-5)


def test_random_mlp_matches_finite_differences():
    rng = np.random.default_rng(5)
    sizes = [6, 8, 7, 3]
    arrays = [rng.normal(size=(4, 6))]
    for a, b in zip(sizes[:-1], sizes[1:]):
        arrays += [rng.normal(size=(a, b)) / math.sqrt(a), rng.normal(size=(b,)) * 0.1]

    def mlp(x, *params):
        h = x
        for i in range(0, len(params), 2):
            h = ad.linear(h, params[i], params[i + 1])
            if i < len(params) - 2:
                h = ad.gelu(h)
        return ad.mean(ad.sigmoid(h))

    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    grads = ad.backward(mlp(*leaves), leaves)
    for k, a in enumerate(arrays):
        fd = ad.finite_difference_grad(
            lambda z, k=k: mlp(*[Tensor(z) if j == k else Tensor(arrays[j]) for j in range(len(arrays))]).item(),
            a, 1e-5)
        assert rel_err(grads[k], fd, floor=1e-7) < 1e-6


# --- every primitive against finite differences, many random shapes ------------


def _shape(rng, ndim, lo=1, hi=4):
    return tuple(int(n) for n in rng.integers(lo, hi + 1, size=ndim))


def _case(rng, kind):
    """Build (fn, arrays) for one primitive with random small shapes."""
    n = int(rng.integers(1, 4))
    if kind == "add":
        s = _shape(rng, n)
        t = tuple(1 if rng.random() < 0.3 else d for d in s)
        return ad.add, [rng.normal(size=s), rng.normal(size=t)]
    if kind == "sub":
        s = _shape(rng, n)
        return ad.sub, [rng.normal(size=s), rng.normal(size=s[1:] or s)]
    if kind == "mul":
        s = _shape(rng, n)
        return ad.mul, [rng.normal(size=s), rng.normal(size=s)]
    if kind == "div":
        s = _shape(rng, n)
        return ad.div, [rng.normal(size=s), rng.uniform(0.5, 2.0, size=s) * rng.choice([-1, 1], size=s)]
    if kind == "matmul":
        b, m, k, p = _shape(rng, 4)
        return ad.matmul, [rng.normal(size=(b, m, k)), rng.normal(size=(k, p))]
    if kind == "softmax":
        return ad.softmax, [rng.normal(size=_shape(rng, n, 2, 5))]
    if kind == "layer_norm":
        # width 2 normalizes to +-1 regardless of input: gradients vanish below FD noise
        s = _shape(rng, n, 3, 6)
        return ad.layer_norm, [rng.normal(size=s), rng.normal(size=s[-1:]), rng.normal(size=s[-1:])]
    if kind == "gelu":
        return ad.gelu, [rng.normal(size=_shape(rng, n)) * 2]
    if kind == "sigmoid":
        return ad.sigmoid, [rng.normal(size=_shape(rng, n)) * 3]
    if kind == "log":
        return ad.log, [rng.uniform(0.2, 3.0, size=_shape(rng, n))]
    if kind == "exp":
        return ad.exp, [rng.normal(size=_shape(rng, n))]
    if kind == "mean":
        s = _shape(rng, n + 1)
        axis = int(rng.integers(0, len(s)))
        return (lambda x: ad.mean(x, axis=axis)), [rng.normal(size=s)]
    if kind == "sum":
        s = _shape(rng, n + 1)
        return (lambda x: ad.sum_(x, axis=-1, keepdims=True)), [rng.normal(size=s)]
    if kind == "conv2d":
        B, cin, cout = _shape(rng, 3, 1, 3)
        kh, kw = _shape(rng, 2, 1, 3)
        stride = int(rng.integers(1, 3))
        pad = (int(rng.integers(0, 2)), int(rng.integers(0, 2)))
        H, W = kh + int(rng.integers(0, 4)), kw + int(rng.integers(0, 4))
        return ((lambda x, w, b: ad.conv2d(x, w, b, stride=stride, padding=pad)),
                [rng.normal(size=(B, cin, H, W)), rng.normal(size=(cout, cin, kh, kw)), rng.normal(size=(cout,))])
    if kind == "reshape":
        s = _shape(rng, 3)
        return (lambda x: ad.reshape(x, (s[0] * s[1], s[2]))), [rng.normal(size=s)]
    if kind == "transpose":
        s = _shape(rng, 3)
        perm = tuple(rng.permutation(3))
        return (lambda x: ad.transpose(x, perm)), [rng.normal(size=s)]
    if kind == "slice":
        s = _shape(rng, 2, 2, 5)
        return (lambda x: x[1:, ::2]), [rng.normal(size=s)]
    if kind == "concat":
        s = _shape(rng, 2)
        return (lambda a, b: ad.concat([a, b], axis=1)), [rng.normal(size=s), rng.normal(size=(s[0], 2))]
    if kind == "roll":
        s = _shape(rng, 2, 2, 5)
        return (lambda x: ad.roll(x, (-1, 2), axis=(0, 1))), [rng.normal(size=s)]
    if kind == "take":
        s = _shape(rng, 2, 2, 5)
        idx = rng.integers(0, s[0], size=(3, 2))
        return (lambda x: ad.take(x, idx)), [rng.normal(size=s)]
    if kind == "clip":
        return (lambda x: ad.clip(x, -0.5, 0.5)), [rng.uniform(-1, 1, size=_shape(rng, n)) + 0.013]
    raise KeyError(kind)


PRIMITIVES = ["add", "sub", "mul", "div", "matmul", "softmax", "layer_norm", "gelu", "sigmoid",
              "log", "exp", "mean", "sum", "conv2d", "reshape", "transpose", "slice", "concat",
              "roll", "take", "clip"]


@pytest.mark.parametrize("kind", PRIMITIVES)
def test_primitive_gradients_random_shapes(kind):
    rng = np.random.default_rng(zlib.crc32(kind.encode()))
    for _ in range(100):
        fn, arrays = _case(rng, kind)
        check_grads(fn, arrays, tol=1e-4 if kind == "softmax" else 1e-6)


def test_softmax_rows_normalized():
    rng = np.random.default_rng(9)
    for _ in range(50):
        x = rng.normal(size=_shape(rng, 3, 1, 6)) * 10
        p = ad.softmax(Tensor(x.astype(np.float32))).data
        assert np.all(p >= 0)
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-6)


def test_float32_stays_float32():
    x = Tensor(np.ones((2, 3), np.float32), requires_grad=True)
    w = Tensor(np.ones((3, 3), np.float32), requires_grad=True)
    y = ad.gelu(ad.layer_norm(ad.matmul(x, w) * 0.5 + 1.0))
    assert y.dtype == np.float32
    ad.backward(ad.mean(y))
    assert x.grad.dtype == np.float32 and w.grad.dtype == np.float32


def test_reductions_bit_reproducible():
    def run():
        gen = ad.Rng(11).generator
        a = Tensor(gen.normal(size=(64, 48)).astype(np.float32), requires_grad=True)
        b = Tensor(gen.normal(size=(48, 32)).astype(np.float32))
        loss = ad.mean(ad.softmax(ad.matmul(a, b)) * 3.0)
        ad.backward(loss)
        return loss.data.tobytes() + a.grad.tobytes()

    assert run() == run()


def test_mac_counter_tags():
    with ad.count_macs() as macs:
        ad.matmul(Tensor(np.ones((5, 2, 3))), Tensor(np.ones((3, 4))), tag="x")
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 1))))
    assert macs["x"] == 5 * 2 * 3 * 4
    assert macs[""] == 6


# --- rng ---------------------------------------------------------------------------


def test_rng_same_seed_same_draws():
    a, b = ad.Rng(42), ad.Rng(42)
    np.testing.assert_array_equal(a.normal(size=10), b.normal(size=10))
    np.testing.assert_array_equal(a.stream("mask", 3).integers(0, 100, 5),
                                  b.stream("mask", 3).integers(0, 100, 5))


def test_rng_streams_independent_of_request_order():
    r = ad.Rng(1)
    x1 = r.stream("item", 1).normal(size=3)
    r.stream("item", 0).normal(size=3)
    r2 = ad.Rng(1)
    r2.stream("item", 0).normal(size=3)
    np.testing.assert_array_equal(x1, r2.stream("item", 1).normal(size=3))
    assert not np.array_equal(x1, r2.stream("item", 0).normal(size=3))


def test_trunc_normal_bounds():
    x = ad.trunc_normal(ad.Rng(0).generator, (20000,), std=0.02)
    assert x.dtype == np.float32
    assert np.abs(x).max() <= 0.04 + 1e-7
    assert abs(float(x.std()) - 0.02 * 0.8796) < 5e-4
