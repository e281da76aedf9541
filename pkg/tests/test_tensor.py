"""Tensor ops against hand values and brute-force loop oracles."""

import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kvseg import tensor as T
from kvseg.errors import DimensionError, FormatError, NumericError
from kvseg.gradcheck import gradient_check, gradient_errors, gradient_report
from kvseg.tensor import Tensor

from conftest import tensor

TRIALS = settings(max_examples=100, deadline=None)


def loop_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def loop_conv(x, w, stride, pad):
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
                s = 0.0
                for c in range(c_in):
                    for di in range(k):
                        for dj in range(k):
                            s += xp[c, i * stride + di, j * stride + dj] * w[o, c, di, dj]
                out[o, i, j] = s
    return out


# -- matmul ---------------------------------------------------------------


def test_matmul_identity_and_hand_product(double):
    a = tensor([[1, 2], [3, 4]])
    assert np.array_equal((tensor(np.eye(2)) @ a).data, a.data)
    assert np.array_equal((tensor([[1, 2]]) @ tensor([[3], [4]])).data, [[11.0]])


def test_matmul_matches_triple_loop(double, rng):
    a, b = rng.standard_normal((4, 5)), rng.standard_normal((5, 3))
    np.testing.assert_allclose((tensor(a) @ tensor(b)).data, loop_matmul(a, b), atol=1e-12, rtol=0)


def test_matmul_shape_mismatch(double):
    with pytest.raises(DimensionError):
        tensor(np.ones((2, 3))) @ tensor(np.ones((2, 3)))


def test_batched_matmul_gradients(double, rng):
    a = tensor(rng.standard_normal((2, 3, 4)), True)
    b = tensor(rng.standard_normal((4, 5)), True)
    assert gradient_check(lambda: ((a @ b) * (a @ b)).sum(), [a, b]) < 1e-6


# -- softmax --------------------------------------------------------------


def test_softmax_examples(double):
    assert np.array_equal(T.softmax_rows(tensor([[0, 0]])).data, [[0.5, 0.5]])
    np.testing.assert_allclose(T.softmax_rows(tensor([[1000, 1000, 1000]])).data, [[1 / 3] * 3], atol=1e-15)
    np.testing.assert_allclose(T.softmax_rows(tensor([[0, math.log(3)]])).data, [[0.25, 0.75]], atol=1e-15)


@TRIALS
@given(st.integers(1, 4), st.integers(1, 6), st.integers(0, 2**31))
def test_softmax_rows_stochastic(m, n, seed):
    x = np.random.default_rng(seed).normal(0, 30, size=(m, n))
    p = T.softmax_rows(tensor(x)).data
    assert (p >= 0).all()
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-6)


# -- conv -----------------------------------------------------------------


def test_conv_hand_examples(double):
    out = T.conv2d(tensor(np.ones((1, 3, 3))), tensor(np.full((1, 1, 1, 1), 2.0)))
    assert np.array_equal(out.data, np.full((1, 3, 3), 2.0))
    out = T.conv2d(tensor([[[1, 2], [3, 4]]]), tensor(np.ones((1, 1, 2, 2))))
    assert np.array_equal(out.data, [[[10.0]]])


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (3, 2)])
def test_conv_matches_nested_loops(double, rng, stride, pad):
    x, w = rng.standard_normal((2, 7, 6)), rng.standard_normal((3, 2, 3, 3))
    got = T.conv2d(tensor(x), tensor(w), stride=stride, padding=pad).data
    np.testing.assert_allclose(got, loop_conv(x, w, stride, pad), atol=1e-12, rtol=0)


def test_grouped_conv_is_per_group(double, rng):
    x, w = rng.standard_normal((4, 5, 5)), rng.standard_normal((4, 1, 3, 3))
    got = T.conv2d(tensor(x), tensor(w), padding=1, groups=4).data
    for c in range(4):
        np.testing.assert_allclose(got[c], loop_conv(x[c : c + 1], w[c : c + 1], 1, 1)[0], atol=1e-12)


def test_conv_rejects_empty_output(double):
    with pytest.raises(DimensionError):
        T.conv2d(tensor(np.ones((1, 2, 2))), tensor(np.ones((1, 1, 3, 3))))


# -- upsampling -----------------------------------------------------------


def test_upsample_examples(double):
    assert np.array_equal(T.upsample_bilinear_2x(tensor(np.full((1, 3, 5), 7.0))).data, np.full((1, 6, 10), 7.0))
    assert np.array_equal(T.upsample_bilinear_2x(tensor([[[5.0]]])).data, np.full((1, 2, 2), 5.0))
    col = T.upsample_bilinear_2x(tensor([[[0.0], [1.0]]])).data[0, :, 0]
    np.testing.assert_allclose(col, [0, 0.25, 0.75, 1], atol=1e-15)


def test_upsample_matches_torch(double, rng):
    torch = pytest.importorskip("torch")
    x = rng.standard_normal((2, 3, 4, 5))
    ref = torch.nn.functional.interpolate(torch.from_numpy(x), scale_factor=2, mode="bilinear", align_corners=False)
    np.testing.assert_allclose(T.upsample_bilinear_2x(tensor(x)).data, ref.numpy(), atol=1e-12)


# -- normalisation --------------------------------------------------------


def test_layer_norm_examples(double):
    one, zero = tensor(np.ones(3)), tensor(np.zeros(3))
    assert np.array_equal(T.layer_norm(tensor([[1, 1, 1]]), one, zero).data, [[0, 0, 0]])
    out = T.layer_norm(tensor([[-1, 1]]), tensor(np.ones(2)), tensor(np.zeros(2))).data
    np.testing.assert_allclose(out, [[-1 / math.sqrt(1 + 1e-5), 1 / math.sqrt(1 + 1e-5)]], atol=1e-15)


def test_layer_norm_formula(double, rng):
    x, g, b = rng.standard_normal((3, 7)), rng.standard_normal(7), rng.standard_normal(7)
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    expect = (x - mu) / np.sqrt(var + 1e-5) * g + b
    np.testing.assert_allclose(T.layer_norm(tensor(x), tensor(g), tensor(b)).data, expect, atol=1e-10)


def test_batch_norm_running_stats(double, rng):
    x = rng.standard_normal((4, 2, 3, 3))
    rm, rv = np.zeros(2), np.ones(2)
    T.batch_norm(tensor(x), tensor(np.ones(2)), tensor(np.zeros(2)), rm, rv, training=True)
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)), atol=1e-15)
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3), ddof=1), atol=1e-15)
    out = T.batch_norm(tensor(x), tensor(np.ones(2)), tensor(np.zeros(2)), rm, rv, training=False).data
    expect = (x - rm[None, :, None, None]) / np.sqrt(rv[None, :, None, None] + 1e-5)
    np.testing.assert_allclose(out, expect, atol=1e-12)


# -- gradient checks per op ----------------------------------------------


def test_gradient_check_quadratic(double):
    w = tensor([1.0, 2.0, 3.0], True)
    (w * w).sum().backward()
    assert np.array_equal(w.grad, [2.0, 4.0, 6.0])
    assert gradient_check(lambda: (w * w).sum(), [w]) < 1e-8


def _shape(draw_seed, lo=1, hi=4, k=2):
    r = np.random.default_rng(draw_seed)
    return r, tuple(int(v) for v in r.integers(lo, hi + 1, size=k))


OPS = {
    "gelu": lambda r, s: (lambda x: T.gelu(x), [tensor(r.standard_normal(s), True)]),
    "relu": lambda r, s: (lambda x: T.relu(x), [tensor(r.standard_normal(s) + 0.05, True)]),
    "softmax": lambda r, s: (lambda x: T.softmax_rows(x), [tensor(r.standard_normal(s), True)]),
    "mean": lambda r, s: (lambda x: x.mean(axis=0, keepdims=True) * x, [tensor(r.standard_normal(s), True)]),
    "layer_norm": lambda r, s: (
        lambda x, g, b: T.layer_norm(x, g, b),
        [tensor(r.standard_normal((s[0], s[1] + 1)), True), tensor(r.standard_normal(s[1] + 1), True),
         tensor(r.standard_normal(s[1] + 1), True)],
    ),
}


@TRIALS
@given(st.sampled_from(sorted(OPS)), st.integers(0, 2**31))
def test_elementwise_ops_gradcheck(name, seed):
    with T.precision("double"):
        r, s = _shape(seed)
        fn, args = OPS[name](r, s)
        probe = r.standard_normal(fn(*args).shape)
        assert gradient_check(lambda: (fn(*args) * tensor(probe)).sum(), args) < 1e-6


@TRIALS
@given(st.integers(0, 2**31))
def test_conv_and_pool_gradcheck(seed):
    with T.precision("double"):
        r = np.random.default_rng(seed)
        c_in, groups = int(r.integers(1, 3)), 1
        if r.random() < 0.3:
            groups = c_in
        c_out = c_in * int(r.integers(1, 3)) if groups > 1 else int(r.integers(1, 3))
        k, stride, pad = int(r.integers(1, 4)), int(r.integers(1, 3)), int(r.integers(0, 2))
        size = k + int(r.integers(0, 3))
        x = tensor(r.standard_normal((2, c_in, size, size)), True)
        w = tensor(r.standard_normal((c_out, c_in // groups, k, k)), True)
        b = tensor(r.standard_normal(c_out), True)

        def f():
            y = T.conv2d(x, w, b, stride, pad, groups)
            if min(y.shape[-2:]) >= 2:
                y = T.max_pool2d(y, 2, 1)
            return (T.upsample_bilinear_2x(y) * T.upsample_bilinear_2x(y)).sum()

        assert gradient_check(f, [x, w, b]) < 1e-6


@TRIALS
@given(st.integers(0, 2**31))
def test_batch_norm_and_cross_entropy_gradcheck(seed):
    with T.precision("double"):
        r = np.random.default_rng(seed)
        x = tensor(r.standard_normal((2, 3, 2, 2)), True)
        g, b = tensor(r.standard_normal(3), True), tensor(r.standard_normal(3), True)
        target = r.integers(0, 3, size=(2, 2, 2))
        rm, rv = np.zeros(3), np.ones(3)
        f = lambda: T.cross_entropy(T.batch_norm(x, g, b, rm, rv, training=True), target)
        assert gradient_check(f, [x, g, b]) < 1e-6


def test_gradient_errors_names_and_sampling(double, rng):
    w = tensor(rng.standard_normal(50), True)
    errs = gradient_errors(lambda: (w * w * w).sum(), {"w": w}, max_entries=5)
    assert list(errs) == ["w"] and errs["w"] < 1e-8


def test_gradient_check_requires_double(rng):
    with T.precision("single"):
        w = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(NumericError):
            gradient_check(lambda: (w * w).sum(), {"w": w})


def test_corrupted_backward_is_detected(double, rng):
    w = tensor(rng.standard_normal(4), True)
    with T.corrupt_backward("mul"):
        assert gradient_check(lambda: (w * w).sum(), [w]) > 1e-3


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_output_is_an_error(double):
    with pytest.raises(NumericError):
        tensor([1e308]) * 10.0


def test_gradient_accumulates_on_reused_leaf(double):
    w = tensor([3.0], True)
    (w * w + w).sum().backward()
    assert w.grad[0] == 7.0


def test_precision_modes():
    with T.precision("single"):
        assert Tensor([1.0]).dtype == np.float32
    with T.precision("double"):
        assert Tensor([1.0]).dtype == np.float64
    with pytest.raises(ValueError):
        T.set_precision("half")


# -- serialization --------------------------------------------------------


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_serialization_round_trip(rng, dtype):
    t = Tensor(rng.standard_normal((2, 3, 4)), dtype=dtype)
    blob = T.tensor_to_bytes(t)
    assert blob[:8] == b"KVSEGTNS"
    assert blob[8:12] == (b"f32\0" if dtype == np.float32 else b"f64\0")
    assert struct.unpack("<I", blob[12:16])[0] == 1
    assert struct.unpack("<4Q", blob[16:48]) == (3, 2, 3, 4)
    back = T.tensor_from_bytes(blob)
    assert back.dtype == dtype and np.array_equal(back.data, t.data)


def test_serialization_rejects_garbage():
    with pytest.raises(FormatError):
        T.tensor_from_bytes(b"not a tensor at all, nope")
    blob = T.tensor_to_bytes(Tensor(np.ones(4), dtype=np.float64))
    with pytest.raises(FormatError):
        T.tensor_from_bytes(blob[:-3])


def test_forward_is_deterministic(double, rng):
    x, w = rng.standard_normal((2, 3, 6, 6)), rng.standard_normal((4, 3, 3, 3))
    a = T.conv2d(tensor(x), tensor(w), padding=1).data
    b = T.conv2d(tensor(x), tensor(w), padding=1).data
    assert a.tobytes() == b.tobytes()


def test_branch_recorder_tracks_piecewise_ops(double):
    x = tensor([[-1.0, 2.0], [3.0, -4.0]])
    with T.record_branches() as a:
        T.relu(x)
        T.max_pool2d(T.reshape(x, (1, 1, 2, 2)), 2, 2)
    x.data[0, 0] = 0.5
    with T.record_branches() as b:
        T.relu(x)
        T.max_pool2d(T.reshape(x, (1, 1, 2, 2)), 2, 2)
    assert len(a) == len(b) == 2
    assert a[0] != b[0] and a[1] == b[1]
    T.relu(x)
    assert len(b) == 2


def test_gradcheck_excludes_kink_straddling_entries(double):
    # 3e-6 sits inside the FD step of the ReLU switch: the central difference reads 0.65, not 1
    x = tensor([3e-6, 0.7, -0.4], True)
    report = gradient_report(lambda: T.sum_(T.relu(x)), {"x": x})
    assert report.kinked == {"x": 1} and report.probed == {"x": 3}
    assert report.max_error < 1e-9
    y = tensor([3e-6], True)
    assert gradient_report(lambda: T.sum_(T.relu(y)), {"y": y}).errors["y"] == math.inf
