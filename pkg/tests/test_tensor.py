import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from priorquant import tensor as T
from priorquant.tensor import ShapeError, Tensor, backward, gradcheck


def brute_conv2d(x, w, b=None, stride=1):
    """Quadruple-loop replicate-padded cross-correlation."""
    cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    ho, wo = (h - 1) // stride + 1, (wd - 1) // stride + 1
    out = np.zeros((cout, ho, wo))
    for o in range(cout):
        for y in range(ho):
            for xx in range(wo):
                acc = 0.0 if b is None else b[o]
                for c in range(cin):
                    for i in range(kh):
                        for j in range(kw):
                            yy = min(max(y * stride + i - kh // 2, 0), h - 1)
                            xj = min(max(xx * stride + j - kw // 2, 0), wd - 1)
                            acc += x[c, yy, xj] * w[o, c, i, j]
                out[o, y, xx] = acc
    return out


def rel_err(a, b):
    return np.linalg.norm(np.asarray(a, np.float64) - b) / max(np.linalg.norm(b), 1e-300)


# ---------------------------------------------------------------- conv2d


def test_conv_identity_kernel():
    x = np.random.default_rng(0).random((1, 5, 5)).astype(np.float32)
    out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1), np.float32)))
    np.testing.assert_array_equal(out.data, x)


def test_conv_constant_preserved_by_normalized_kernel():
    x = np.full((1, 6, 7), 0.37)
    k = np.random.default_rng(1).random((1, 1, 3, 3))
    k /= k.sum()
    out = T.conv2d(Tensor(x), Tensor(k))
    np.testing.assert_allclose(out.data, 0.37, atol=1e-12)


def test_conv_matches_brute_force():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 8, 8))
    w = rng.standard_normal((3, 2, 3, 3))
    assert rel_err(T.conv2d(Tensor(x), Tensor(w)).data, brute_conv2d(x, w)) <= 1e-5


@pytest.mark.parametrize("trial", range(20))
def test_conv_random_configs(trial):
    rng = np.random.default_rng(100 + trial)
    kh, kw = rng.choice([1, 3, 5], 2)
    cin, cout = rng.integers(1, 4, 2)
    h, w = rng.integers(kh // 2 + 1, 10), rng.integers(kw // 2 + 1, 10)
    stride = int(rng.choice([1, 2]))
    x = rng.standard_normal((cin, h, w))
    k = rng.standard_normal((cout, cin, kh, kw))
    b = rng.standard_normal(cout)
    got = T.conv2d(Tensor(x), Tensor(k), Tensor(b), stride=stride).data
    assert rel_err(got, brute_conv2d(x, k, b, stride)) <= 1e-5


def test_conv_batched_equals_per_image():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((3, 2, 6, 6))
    w = rng.standard_normal((4, 2, 3, 3))
    batched = T.conv2d(Tensor(x), Tensor(w)).data
    for n in range(3):
        np.testing.assert_allclose(batched[n], T.conv2d(Tensor(x[n]), Tensor(w)).data, rtol=1e-12)


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


def test_conv_even_kernel_rejected():
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((1, 1, 2, 2))))


# ------------------------------------------------------------------- fft


def test_fft_constant_image():
    out = T.fft2(Tensor(np.full((4, 6), 2.5))).data
    assert out[0, 0, 0] == pytest.approx(2.5 * 24, abs=1e-6)
    mask = np.ones((2, 4, 6), bool)
    mask[0, 0, 0] = False
    assert np.abs(out[mask]).max() <= 1e-6


def test_fft_impulse_flat_magnitude():
    x = np.zeros((5, 7))
    x[0, 0] = 1.0
    out = T.fft2(Tensor(x)).data
    np.testing.assert_allclose(np.hypot(out[0], out[1]), 1.0, atol=1e-12)


def test_fft_parseval():
    x = np.random.default_rng(4).standard_normal((8, 8))
    out = T.fft2(Tensor(x)).data
    lhs = (x**2).sum()
    rhs = (out**2).sum() / 64
    assert abs(lhs - rhs) / lhs <= 1e-5


def test_fft_matches_dft_matrix():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((3, 5))
    fh = np.exp(-2j * np.pi * np.outer(np.arange(3), np.arange(3)) / 3)
    fw = np.exp(-2j * np.pi * np.outer(np.arange(5), np.arange(5)) / 5)
    ref = fh @ x @ fw
    out = T.fft2(Tensor(x)).data
    np.testing.assert_allclose(out[0] + 1j * out[1], ref, atol=1e-12)


@pytest.mark.parametrize("h", [1, 2, 4, 7, 8, 16])
@pytest.mark.parametrize("w", [1, 2, 4, 7, 8, 16])
def test_fft_roundtrip(h, w):
    x = np.random.default_rng(h * 31 + w).standard_normal((h, w)).astype(np.float32)
    back = T.ifft2(T.fft2(Tensor(x))).data
    assert rel_err(back[0], x) <= 1e-5
    assert np.abs(back[1]).max() <= 1e-5 * np.abs(x).max()


# -------------------------------------------------------- pixel shuffling


def test_pixel_shuffle_r1_identity():
    x = np.random.default_rng(6).random((3, 4, 5))
    np.testing.assert_array_equal(T.pixel_shuffle(Tensor(x), 1).data, x)


def test_pixel_shuffle_layout():
    x = np.array([1.0, 2.0, 3.0, 4.0]).reshape(4, 1, 1)
    np.testing.assert_array_equal(T.pixel_shuffle(Tensor(x), 2).data, [[[1.0, 2.0], [3.0, 4.0]]])


def test_pixel_shuffle_index_rule():
    r = 3
    x = np.random.default_rng(7).random((2 * r * r, 2, 3))
    out = T.pixel_shuffle(Tensor(x), r).data
    for c in range(2):
        for h in range(2):
            for w in range(3):
                for dy in range(r):
                    for dx in range(r):
                        assert out[c, r * h + dy, r * w + dx] == x[c * r * r + dy * r + dx, h, w]


@pytest.mark.parametrize("r", [1, 2, 4])
def test_pixel_shuffle_roundtrip(r):
    x = np.random.default_rng(r).random((2 * r * r, 3, 3))
    np.testing.assert_array_equal(T.pixel_unshuffle(T.pixel_shuffle(Tensor(x), r), r).data, x)
    y = np.random.default_rng(r + 10).random((2, 4 * r, 4 * r))
    np.testing.assert_array_equal(T.pixel_shuffle(T.pixel_unshuffle(Tensor(y), r), r).data, y)


def test_pixel_shuffle_bad_channels():
    with pytest.raises(ShapeError):
        T.pixel_shuffle(Tensor(np.zeros((3, 2, 2))), 2)


# ------------------------------------------------ elementwise / reductions


def test_relu_values():
    np.testing.assert_array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])


def test_downsample_area_block_mean():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])[None]
    assert T.downsample_area(Tensor(x)).data[0, 0, 0] == 2.5


def test_upsample_then_downsample_identity():
    x = np.random.default_rng(8).random((2, 3, 4))
    np.testing.assert_allclose(T.downsample_area(T.upsample_nearest(Tensor(x))).data, x, rtol=1e-6)


def test_concat_and_recover():
    a = np.random.default_rng(9).random((2, 3, 3))
    b = np.random.default_rng(10).random((3, 3, 3))
    out = T.concat([Tensor(a), Tensor(b)], axis=0).data
    assert out.shape == (5, 3, 3)
    np.testing.assert_array_equal(out[:2], a)
    np.testing.assert_array_equal(out[2:], b)


def test_shape_mismatch_rejected():
    with pytest.raises(ShapeError):
        T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))
    with pytest.raises(ShapeError):
        T.concat([Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 3, 2)))], axis=0)


# ----------------------------------------------------------------- backward


def test_backward_sum_gives_ones():
    x = Tensor(np.random.default_rng(11).random((3, 4)), requires_grad=True)
    backward(T.tsum(x))
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_backward_square():
    xv = np.random.default_rng(12).standard_normal(6)
    x = Tensor(xv, requires_grad=True)
    backward(T.tsum(x * x))
    np.testing.assert_allclose(x.grad, 2 * xv)


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        backward(x * 2.0)


def test_backward_twice_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    loss = T.tsum(x * x)
    backward(loss)
    with pytest.raises(RuntimeError):
        backward(loss)


def test_leaf_grads_accumulate_until_reset():
    x = Tensor(np.ones(2), requires_grad=True)
    backward(T.tsum(x))
    backward(T.tsum(x))
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])
    x.zero_grad()
    assert x.grad is None


def test_backward_returns_leaf_map():
    x = Tensor(np.ones(2), requires_grad=True)
    c = Tensor(np.ones(2))
    grads = backward(T.tsum(x * c))
    assert list(grads) == [x]


def test_detach_blocks_gradient():
    x = Tensor(np.ones(3), requires_grad=True)
    y = Tensor(np.ones(3), requires_grad=True)
    backward(T.tsum(T.detach(x) * y))
    assert x.grad is None
    np.testing.assert_array_equal(y.grad, np.ones(3))


# ------------------------------------------------ finite-difference checks


def _ops(rng, dtype):
    """(name, fn, inputs) for every differentiable op at a random point."""
    r = lambda *s: rng.standard_normal(s).astype(dtype)
    away = lambda *s: (np.sign(r(*s)) * (0.2 + rng.random(s))).astype(dtype)
    return [
        ("add", lambda a, b: T.add(a, b), [r(2, 3), r(2, 3)]),
        ("add_broadcast", lambda a, b: T.add(a, b), [r(2, 3, 3), r(2, 1, 1)]),
        ("sub", lambda a, b: T.sub(a, b), [r(3, 2), r(3, 2)]),
        ("mul", lambda a, b: T.mul(a, b), [r(2, 3), r(2, 3)]),
        ("scalar_mul", lambda a: T.mul(a, 0.7), [r(4)]),
        ("relu", T.relu, [away(3, 4)]),
        ("abs", T.tabs, [away(3, 4)]),
        ("sum", lambda a: T.tsum(a, axis=1), [r(3, 4)]),
        ("mean", lambda a: T.mean(a), [r(3, 4)]),
        ("concat", lambda a, b: T.concat([a, b], axis=0), [r(2, 3, 3), r(1, 3, 3)]),
        ("transpose", lambda a: T.transpose(a, (2, 0, 1)), [r(2, 3, 4)]),
        ("reshape", lambda a: T.reshape(a, (6, 2)), [r(3, 4)]),
        ("take_rows", lambda a: T.take_rows(a, np.array([[0, 2], [2, 1]])), [r(3, 2)]),
        ("downsample_area", T.downsample_area, [r(2, 4, 4)]),
        ("upsample_nearest", T.upsample_nearest, [r(2, 2, 3)]),
        ("pixel_shuffle", lambda a: T.pixel_shuffle(a, 2), [r(4, 2, 2)]),
        ("pixel_unshuffle", lambda a: T.pixel_unshuffle(a, 2), [r(1, 4, 4)]),
        ("conv2d", lambda a, w, b: T.conv2d(a, w, b), [r(2, 5, 4), r(2, 2, 3, 3), r(2)]),
        ("conv2d_stride2", lambda a, w: T.conv2d(a, w, stride=2), [r(1, 5, 6), r(2, 1, 3, 3)]),
        ("conv2d_5x5", lambda a, w: T.conv2d(a, w), [r(1, 4, 4), r(1, 1, 5, 5)]),
        ("fft2", T.fft2, [r(4, 5)]),
        ("ifft2", T.ifft2, [r(2, 3, 4)]),
    ]


OP_NAMES = [name for name, _, _ in _ops(np.random.default_rng(0), np.float64)]


@pytest.mark.parametrize("name", OP_NAMES)
@pytest.mark.parametrize("point", range(5))
def test_gradcheck_float64(name, point):
    rng = np.random.default_rng(1000 + point)
    _, fn, arrays = next(op for op in _ops(rng, np.float64) if op[0] == name)
    err = gradcheck(fn, [Tensor(a) for a in arrays], seed=point)
    assert err <= 1e-6, f"{name}: {err}"


@pytest.mark.parametrize("name", OP_NAMES)
@pytest.mark.parametrize("point", range(5))
def test_gradcheck_float32(name, point):
    rng = np.random.default_rng(2000 + point)
    _, fn, arrays = next(op for op in _ops(rng, np.float32) if op[0] == name)
    err = gradcheck(fn, [Tensor(a) for a in arrays], seed=point)
    assert err <= 1e-3, f"{name}: {err}"


# ---------------------------------------------------------------- properties


@settings(max_examples=25, deadline=None)
@given(
    c=st.integers(1, 3),
    h=st.integers(1, 6),
    w=st.integers(1, 6),
    seed=st.integers(0, 2**16),
)
def test_finite_inputs_give_finite_outputs(c, h, w, seed):
    x = Tensor(np.random.default_rng(seed).standard_normal((c, h, w)))
    k = Tensor(np.random.default_rng(seed + 1).standard_normal((2, c, 3, 3)))
    for out in (T.conv2d(x, k), T.relu(x), T.fft2(x), T.upsample_nearest(x), T.tabs(x)):
        assert np.all(np.isfinite(out.data))


@settings(max_examples=25, deadline=None)
@given(h=st.integers(1, 9), w=st.integers(1, 9), seed=st.integers(0, 2**16))
def test_conv_adjoint_identity(h, w, seed):
    """<conv(x), y> == <x, conv^T(y)> where the adjoint comes from backward."""
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((2, h, w)), requires_grad=True)
    k = Tensor(rng.standard_normal((3, 2, 3, 3)))
    y = rng.standard_normal((3, h, w))
    out = T.conv2d(x, k)
    lhs = float((out.data * y).sum())
    backward(T.tsum(T.mul(out, Tensor(y))))
    rhs = float((x.data * x.grad).sum())
    assert lhs == pytest.approx(rhs, rel=1e-9, abs=1e-9)
