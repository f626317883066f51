import numpy as np
import pytest

from leafnet import backend


@pytest.fixture
def restore_backend():
    prev = backend.active_backend()
    yield
    backend.set_backend(prev)


def both(fn, *args):
    backend.set_backend("numba")
    a = fn(*args)
    backend.set_backend("numpy")
    b = fn(*args)
    return a, b


# f32 needs an absolute floor: summation-order differences show up as
# ~1e-7 absolute noise, which is a large *relative* error near zero
TOL = {np.float32: dict(rtol=1e-4, atol=1e-6), np.float64: dict(rtol=1e-12, atol=1e-30)}


def assert_close(a, b):
    if isinstance(a, tuple):
        for x, y in zip(a, b):
            assert_close(x, y)
        return
    if a.dtype in (np.int64, np.int32):
        np.testing.assert_array_equal(a, b)
    else:
        np.testing.assert_allclose(a, b, **TOL[a.dtype.type])


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_matmul_variants_agree(rng, restore_backend, dtype):
    a = rng.standard_normal((7, 5)).astype(dtype)
    b = rng.standard_normal((5, 9)).astype(dtype)
    assert_close(*both(backend.matmul_nn, a, b))
    assert_close(*both(backend.matmul_nt, a, b.T.copy()))
    assert_close(*both(backend.matmul_tn, a.T.copy(), b))


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("stride", [(1, 1), (2, 2), (1, 2)])
def test_conv_agrees(rng, restore_backend, dtype, stride):
    x = rng.standard_normal((2, 3, 9, 9)).astype(dtype)
    w = rng.standard_normal((4, 3, 3, 3)).astype(dtype)
    assert_close(*both(backend.conv2d_forward, x, w, stride))
    ho = (9 - 3) // stride[0] + 1
    wo = (9 - 3) // stride[1] + 1
    dy = rng.standard_normal((2, 4, ho, wo)).astype(dtype)
    assert_close(*both(backend.conv2d_input_grad, dy, w, stride, x.shape))
    assert_close(*both(backend.conv2d_weight_grad, dy, x, stride, w.shape))


@pytest.mark.parametrize("padding", [(0, 0), (1, 1)])
def test_maxpool_agrees(rng, restore_backend, padding):
    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    (o1, i1), (o2, i2) = both(backend.maxpool_forward, x, (3, 3), (2, 2), padding)
    np.testing.assert_array_equal(o1, o2)
    np.testing.assert_array_equal(i1, i2)  # same first-argmax tie rule
    dy = np.ones_like(o1)
    d1, d2 = both(backend.maxpool_backward, dy, i1, x.shape)
    np.testing.assert_array_equal(d1, d2)


def test_reductions_agree(rng, restore_backend):
    a = rng.standard_normal((11, 300))
    s1, s2 = both(backend.reduce_sum_2d, a)
    np.testing.assert_allclose(s1, s2, rtol=1e-12)
    (m1, i1), (m2, i2) = both(backend.reduce_max_2d, a)
    np.testing.assert_array_equal(m1, m2)
    np.testing.assert_array_equal(i1, i2)


def test_channel_stats_agree(rng, restore_backend):
    x = rng.standard_normal((4, 6, 5, 5))
    assert_close(*both(backend.channel_stats, x))


def test_within_backend_bitwise_repeatability(rng, each_backend):
    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    r1 = backend.conv2d_forward(x, w, (1, 1))
    r2 = backend.conv2d_forward(x.copy(), w.copy(), (1, 1))
    assert np.array_equal(r1, r2)


def test_env_selection(monkeypatch):
    # the active backend is switchable; the env variable picks the default
    prev = backend.active_backend()
    try:
        backend.set_backend("numpy")
        assert backend.active_backend() == "numpy"
        backend.set_backend("numba")
        assert backend.active_backend() == "numba"
    finally:
        backend.set_backend(prev)
