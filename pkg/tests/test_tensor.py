import numpy as np
import pytest
from hypothesis import given, strategies as st

from psrpn import tensor as T
from psrpn.tensor import ShapeError, Tensor, no_grad


def naive_conv(x, w, stride, pad):
    """Six nested loops over the zero-padded input."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    sh, sw = stride
    ph, pw = pad
    xp = np.zeros((n, c, h + 2 * ph, wd + 2 * pw))
    xp[:, :, ph : ph + h, pw : pw + wd] = x
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (wd + 2 * pw - kw) // sw + 1
    out = np.zeros((n, o, ho, wo))
    for b in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ic in range(c):
                        for di in range(kh):
                            for dj in range(kw):
                                acc += xp[b, ic, i * sh + di, j * sw + dj] * w[oc, ic, di, dj]
                    out[b, oc, i, j] = acc
    return out


@given(
    st.integers(1, 2), st.integers(1, 3), st.integers(1, 3),
    st.integers(1, 4), st.integers(1, 4), st.integers(1, 2), st.integers(0, 2),
    st.integers(0, 2**31 - 1),
)
def test_conv_matches_naive_loops(n, c, o, kh, kw, stride, pad, seed):
    rng = np.random.default_rng(seed)
    h, w = rng.integers(max(kh, 1), 8), rng.integers(max(kw, 1), 8)
    x = rng.standard_normal((n, c, h, w))
    wt = rng.standard_normal((o, c, kh, kw))
    got = T.conv2d(Tensor(x), Tensor(wt), stride, pad).data
    want = naive_conv(x, wt, (stride, stride), (pad, pad))
    assert got.shape == want.shape
    np.testing.assert_allclose(got, want, atol=1e-6, rtol=0)


def test_conv_output_size_formula():
    x = Tensor(np.zeros((1, 2, 13, 10)))
    w = Tensor(np.zeros((3, 2, 3, 5)))
    out = T.conv2d(x, w, (2, 3), (1, 2))
    assert out.shape == (1, 3, (13 + 2 - 3) // 2 + 1, (10 + 4 - 5) // 3 + 1)


def test_conv_keeps_float32():
    x = Tensor(np.ones((1, 2, 5, 5), np.float32))
    w = Tensor(np.ones((3, 2, 3, 3), np.float32))
    assert T.conv2d(x, w, 1, 1).dtype == np.float32


def test_conv_errors():
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.zeros((1, 2, 5, 5))), Tensor(np.zeros((3, 4, 3, 3))))
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.zeros((1, 2, 2, 2))), Tensor(np.zeros((3, 2, 3, 3))))


def test_conv_backward_matches_naive_adjoint(rng):
    # <conv(x), g> = <x, conv^T(g)>: check the input gradient against the naive forward
    x = rng.standard_normal((2, 3, 7, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    g = rng.standard_normal((2, 4, 4, 3))
    xt, wt = Tensor(x, requires_grad=True), Tensor(w, requires_grad=True)
    T.weighted_sum(T.conv2d(xt, wt, 2, 1), g).backward()
    eps = 1e-6
    for idx in [(0, 0, 0, 0), (1, 2, 3, 4), (0, 1, 6, 5)]:
        d = np.zeros_like(x)
        d[idx] = eps
        num = ((naive_conv(x + d, w, (2, 2), (1, 1)) - naive_conv(x - d, w, (2, 2), (1, 1))) * g).sum() / (2 * eps)
        assert xt.grad[idx] == pytest.approx(num, rel=1e-6, abs=1e-8)


def per_pixel_upsample(x):
    """Half-pixel bilinear 2x with edge clamping, one output pixel at a time."""
    n, c, h, w = x.shape
    out = np.zeros((n, c, 2 * h, 2 * w))
    for i in range(2 * h):
        for j in range(2 * w):
            sy = min(max((i + 0.5) / 2 - 0.5, 0), h - 1)
            sx = min(max((j + 0.5) / 2 - 0.5, 0), w - 1)
            y0, x0 = int(np.floor(sy)), int(np.floor(sx))
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            fy, fx = sy - y0, sx - x0
            out[:, :, i, j] = ((1 - fy) * (1 - fx) * x[:, :, y0, x0] + (1 - fy) * fx * x[:, :, y0, x1]
                               + fy * (1 - fx) * x[:, :, y1, x0] + fy * fx * x[:, :, y1, x1])
    return out


def test_bilinear_upsample_matches_per_pixel(rng):
    x = rng.standard_normal((2, 3, 4, 5))
    np.testing.assert_allclose(T.bilinear_upsample2x(Tensor(x)).data, per_pixel_upsample(x), atol=1e-12)


def test_upsample_preserves_constants():
    x = np.full((1, 1, 3, 3), 2.5)
    np.testing.assert_allclose(T.bilinear_upsample2x(Tensor(x)).data, 2.5)


def test_avg_downsample(rng):
    x = rng.standard_normal((1, 2, 4, 6))
    want = x.reshape(1, 2, 2, 2, 3, 2).mean(axis=(3, 5))
    np.testing.assert_allclose(T.avg_downsample2x(Tensor(x)).data, want)


def test_batch_norm_training_statistics(rng):
    x = rng.standard_normal((4, 3, 5, 5)) * 3 + 2
    rm, rv = np.zeros(3), np.ones(3)
    out = T.batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), rm, rv, True).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-10)
    np.testing.assert_allclose(out.std(axis=(0, 2, 3)), 1, atol=1e-5)
    m = x.size // 3
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * m / (m - 1))


def test_batch_norm_inference_uses_running_stats(rng):
    x = rng.standard_normal((2, 2, 3, 3))
    rm, rv = np.array([1.0, -1.0]), np.array([4.0, 0.25])
    out = T.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm.copy(), rv.copy(), False).data
    want = (x - rm[None, :, None, None]) / np.sqrt(rv[None, :, None, None] + 1e-5)
    np.testing.assert_allclose(out, want)


def test_backward_accumulates_over_shared_paths():
    a = Tensor(np.array([2.0]), requires_grad=True)
    b = T.add(a, a)
    c = T.add(b, T.scale(a, 3.0))
    T.sum_all(c).backward()
    assert a.grad[0] == 5.0


def test_no_grad_records_nothing():
    a = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        b = T.scale(a, 2.0)
    assert not b.requires_grad and not b._parents


def test_forward_is_deterministic(rng):
    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    a = T.conv2d(Tensor(x), Tensor(w), 1, 1).data
    b = T.conv2d(Tensor(x), Tensor(w), 1, 1).data
    assert a.tobytes() == b.tobytes()


def test_split_sizes_must_sum():
    with pytest.raises(ShapeError):
        T.split(Tensor(np.zeros((2, 5))), [2, 2], axis=1)
