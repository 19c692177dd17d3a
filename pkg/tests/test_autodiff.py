import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssar import autodiff as ad
from ssar.autodiff import NonFiniteError, Tensor
from ssar.gradcheck import check_gradients


def t64(x, grad=False):
    return Tensor(x, requires_grad=grad, dtype=np.float64)


# nested-loop oracles -------------------------------------------------------------


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for p in range(k):
                out[i, j] += a[i, p] * b[p, j]
    return out


def naive_conv2d(x, w, stride, pad):
    c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    xp = np.zeros((c_in, h + 2 * pad, wd + 2 * pad))
    xp[:, pad : pad + h, pad : pad + wd] = x
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((c_out, ho, wo))
    for o in range(c_out):
        for i in range(ho):
            for j in range(wo):
                for c in range(c_in):
                    for u in range(k):
                        for v in range(k):
                            out[o, i, j] += w[o, c, u, v] * xp[c, i * stride + u, j * stride + v]
    return out


def naive_conv3d(x, w, stride, pad):
    c_in, d, h, wd = x.shape
    c_out, _, k, _, _ = w.shape
    xp = np.zeros((c_in, d + 2 * pad, h + 2 * pad, wd + 2 * pad))
    xp[:, pad : pad + d, pad : pad + h, pad : pad + wd] = x
    dims = [(s + 2 * pad - k) // stride + 1 for s in (d, h, wd)]
    out = np.zeros([c_out] + dims)
    for o in range(c_out):
        for a in range(dims[0]):
            for i in range(dims[1]):
                for j in range(dims[2]):
                    for c in range(c_in):
                        for z in range(k):
                            for u in range(k):
                                for v in range(k):
                                    out[o, a, i, j] += w[o, c, z, u, v] * xp[c, a * stride + z, i * stride + u, j * stride + v]
    return out


# elementwise ---------------------------------------------------------------------


def test_elementwise_examples():
    assert ad.sigmoid(Tensor([0.0])).item() == 0.5
    assert ad.tanh(Tensor([0.0])).item() == 0.0
    assert ad.relu(Tensor([-3.0])).item() == 0.0
    assert ad.elementwise("sigmoid", t64([1.0])).item() == pytest.approx(0.73106, abs=1e-5)
    assert ad.elementwise("add", Tensor([1.0]), Tensor([2.0])).item() == 3.0


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2,\).*\(3,\)"):
        ad.add(Tensor(np.zeros(2)), Tensor(np.zeros(3)))


def test_sigmoid_gradient_rule(f64):
    x = t64([0.3, -1.2], grad=True)
    ad.reduce("sum", ad.sigmoid(x)).backward()
    s = 1 / (1 + np.exp(-x.data))
    np.testing.assert_allclose(x.grad, s * (1 - s), rtol=1e-12)


def test_relu_and_abs_subgradient_zero_at_origin(f64):
    x = t64([0.0, 0.0], grad=True)
    ad.reduce("sum", ad.add(ad.relu(x), ad.absolute(x))).backward()
    assert np.all(x.grad == 0)


def test_bias_add_only_over_trailing_dim():
    ad.bias_add(Tensor(np.zeros((2, 3))), Tensor(np.ones(3)))
    with pytest.raises(ValueError):
        ad.bias_add(Tensor(np.zeros((2, 3))), Tensor(np.ones(2)))


# matmul ---------------------------------------------------------------------------


def test_matmul_examples():
    m = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(ad.matmul(Tensor(np.eye(2)), m).data, m.data)
    assert ad.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_matches_triple_loop(f64, rng):
    for _ in range(5):
        a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
        assert np.max(np.abs(ad.matmul(t64(a), t64(b)).data - naive_matmul(a, b))) < 1e-12


def test_matmul_dimension_error():
    with pytest.raises(ValueError, match="inner"):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


# convolution ----------------------------------------------------------------------


def test_conv2d_examples():
    out = ad.conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.full((1, 1, 1, 1), 2.0)))
    np.testing.assert_array_equal(out.data, np.full((1, 3, 3), 2.0))
    ramp = np.arange(9.0).reshape(1, 3, 3)
    avg = ad.conv2d(Tensor(ramp, dtype=np.float64), Tensor(np.full((1, 1, 3, 3), 1 / 9), dtype=np.float64))
    assert avg.shape == (1, 1, 1)
    assert avg.item() == pytest.approx(ramp.mean(), abs=1e-12)


@pytest.mark.parametrize("stride,pad", list(itertools.product([1, 2], [0, 1])))
def test_conv2d_matches_nested_loops(f64, rng, stride, pad):
    x, w = rng.standard_normal((2, 8, 8)), rng.standard_normal((4, 2, 3, 3))
    got = ad.conv2d(t64(x), t64(w), stride, pad).data
    assert np.max(np.abs(got - naive_conv2d(x, w, stride, pad))) < 1e-10


def test_conv2d_batched_equals_per_sample(f64, rng):
    x, w = rng.standard_normal((3, 2, 6, 6)), rng.standard_normal((4, 2, 3, 3))
    batched = ad.conv2d(t64(x), t64(w), 2, 1).data
    for n in range(3):
        np.testing.assert_array_equal(batched[n], ad.conv2d(t64(x[n]), t64(w), 2, 1).data)


def test_conv3d_examples():
    v = ad.conv3d(Tensor(np.full((1, 1, 1, 1), 3.0)), Tensor(np.full((1, 1, 1, 1, 1), 2.5)))
    assert v.item() == 7.5
    ones = ad.conv3d(Tensor(np.ones((1, 3, 3, 3))), Tensor(np.ones((1, 1, 3, 3, 3))))
    assert ones.item() == 27.0


@pytest.mark.parametrize("stride,pad", list(itertools.product([1, 2], [0, 1])))
def test_conv3d_matches_nested_loops(f64, rng, stride, pad):
    x, w = rng.standard_normal((1, 4, 4, 4)), rng.standard_normal((2, 1, 3, 3, 3))
    got = ad.conv3d(t64(x), t64(w), stride, pad).data
    assert np.max(np.abs(got - naive_conv3d(x, w, stride, pad))) < 1e-10


def test_conv_kernel_larger_than_input():
    with pytest.raises(ValueError, match="larger than padded input"):
        ad.conv2d(Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))


def test_conv_output_extent_formula():
    for h, k, s, p in [(8, 3, 2, 1), (7, 3, 2, 0), (50, 7, 2, 3), (5, 1, 2, 0)]:
        out = ad.conv2d(Tensor(np.zeros((1, h, h))), Tensor(np.zeros((1, 1, k, k))), s, p)
        assert out.shape[1] == (h + 2 * p - k) // s + 1


# reductions -----------------------------------------------------------------------


def test_reduce_examples():
    assert ad.reduce("mean", Tensor([1.0, 2.0, 3.0])).item() == 2.0
    assert ad.reduce("max", Tensor([[1.0, 5.0], [7.0, 2.0]]), axes=1).data.tolist() == [5.0, 7.0]
    x = t64([1.0, 2.0, 3.0])
    ex2 = ad.reduce("mean", ad.mul(x, x)).item()
    ex = ad.reduce("mean", x).item()
    assert ex2 - ex * ex == pytest.approx(2 / 3, abs=1e-12)


def test_reduce_axes_handling():
    x = Tensor(np.arange(6.0).reshape(2, 3))
    np.testing.assert_array_equal(ad.reduce("sum", x, axes=()).data, x.data)
    with pytest.raises(ValueError, match="out of range"):
        ad.reduce("sum", x, axes=2)


def test_max_routes_gradient_to_argmax(f64):
    x = t64([[1.0, 5.0], [7.0, 2.0]], grad=True)
    ad.reduce("sum", ad.reduce("max", x, axes=1)).backward()
    assert x.grad.tolist() == [[0.0, 1.0], [1.0, 0.0]]


# backward -------------------------------------------------------------------------


def test_backward_examples(f64):
    x = t64(np.zeros((2, 3)), grad=True)
    ad.reduce("sum", x).backward()
    assert np.all(x.grad == 1.0)
    y = t64([1.0, 2.0], grad=True)
    ad.reduce("sum", ad.mul(y, y)).backward()
    assert y.grad.tolist() == [2.0, 4.0]


def test_backward_errors():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        ad.scale(x, 2.0).backward()
    loss = ad.reduce("sum", x)
    loss.backward()
    with pytest.raises(RuntimeError, match="double backward"):
        loss.backward()


def test_gradient_accumulation_matches_path_sum(f64, rng):
    a = rng.standard_normal(4)
    x = t64(a, grad=True)
    # x used on two paths: tanh(x) and x*x
    ad.reduce("sum", ad.add(ad.tanh(x), ad.mul(x, x))).backward()
    x1 = t64(a, grad=True)
    ad.reduce("sum", ad.tanh(x1)).backward()
    x2 = t64(a, grad=True)
    ad.reduce("sum", ad.mul(x2, x2)).backward()
    np.testing.assert_allclose(x.grad, x1.grad + x2.grad, rtol=1e-14)


def test_graph_order_is_topological(f64):
    x = t64([1.0, 2.0], grad=True)
    y = ad.tanh(x)
    loss = ad.reduce("sum", ad.add(y, ad.mul(y, x)))
    order = ad.graph_order(loss)
    pos = {id(n): i for i, n in enumerate(order)}
    assert len(pos) == len(order)
    for node in order:
        for p in node._parents:
            assert pos[id(p)] < pos[id(node)]


def test_nonfinite_raises():
    with np.errstate(over="ignore"), pytest.raises(NonFiniteError):
        ad.scale(Tensor([3e38]), 10.0)


def test_no_grad_builds_no_graph():
    x = Tensor([1.0], requires_grad=True)
    with ad.no_grad():
        y = ad.tanh(x)
    assert not y.requires_grad and y._parents == ()


def test_bit_identical_repeat(rng):
    x = rng.standard_normal((2, 2, 8, 8)).astype(np.float32)
    w = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
    runs = []
    for _ in range(2):
        xt, wt = Tensor(x, requires_grad=True), Tensor(w, requires_grad=True)
        out = ad.conv2d(xt, wt, 2, 1)
        ad.reduce("sum", ad.mul(out, out)).backward()
        runs.append((out.data.tobytes(), xt.grad.tobytes(), wt.grad.tobytes()))
    assert runs[0] == runs[1]


def test_default_dtype_is_float32_and_switchable():
    assert Tensor([1.0]).dtype == np.float32
    with ad.precision(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


@settings(max_examples=30, deadline=None)
@given(
    st.integers(1, 4),
    st.integers(1, 4),
    st.integers(1, 4),
    st.integers(0, 10_000),
)
def test_matmul_property(m, k, n, seed):
    r = np.random.default_rng(seed)
    a, b = r.standard_normal((m, k)), r.standard_normal((k, n))
    got = ad.matmul(t64(a), t64(b)).data
    assert np.max(np.abs(got - naive_matmul(a, b))) < 1e-12


def test_finite_difference_composite(f64, rng):
    def composite(x, w):
        y = ad.relu(ad.conv2d(x, w, 1, 1))
        return ad.reduce("mean", ad.tanh(y), axes=(1, 2))

    res = check_gradients(composite, [t64(rng.standard_normal((2, 5, 5)), True), t64(rng.standard_normal((3, 2, 3, 3)), True)])
    assert res.max_rel_error < 1e-4
