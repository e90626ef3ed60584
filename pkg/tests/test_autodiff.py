import math

import numpy as np
import pytest

from plumecast import autodiff as ad
from plumecast.autodiff import Tensor, finite_diff_check
from plumecast.autodiff.ops import _COLS_BUDGET

SEEDS = [0, 1, 2, 3, 4]


def weighted_sum(y, rng):
    """Scalar probe with O(1) gradients everywhere."""
    w = Tensor(rng.normal(size=y.shape))
    return (y * w).sum()


# -- conv2d --------------------------------------------------------------------

def test_conv2d_identity_kernel():
    x = np.random.default_rng(0).normal(size=(2, 5, 6, 3))
    k = np.eye(3).reshape(1, 1, 3, 3)
    y = ad.conv2d(Tensor(x), Tensor(k), Tensor(np.zeros(3)))
    np.testing.assert_array_equal(y.data, x)


def test_conv2d_ones_kernel_on_one_hot():
    x = np.zeros((1, 5, 5, 1))
    x[0, 2, 2, 0] = 1.0
    y = ad.conv2d(Tensor(x), Tensor(np.ones((3, 3, 1, 1)))).data[0, :, :, 0]
    expected = np.zeros((5, 5))
    expected[1:4, 1:4] = 1.0
    np.testing.assert_array_equal(y, expected)
    # corner one-hot is clipped by the zero padding
    x = np.zeros((1, 4, 4, 1))
    x[0, 0, 0, 0] = 1.0
    y = ad.conv2d(Tensor(x), Tensor(np.ones((3, 3, 1, 1)))).data[0, :, :, 0]
    assert y.sum() == 4 and y[:2, :2].sum() == 4


def test_conv2d_matches_direct_loop():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 4, 5, 3))
    k = rng.normal(size=(3, 3, 3, 2))
    b = rng.normal(size=2)
    y = ad.conv2d(Tensor(x), Tensor(k), Tensor(b)).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ref = np.zeros_like(y)
    for n in range(2):
        for i in range(4):
            for j in range(5):
                ref[n, i, j] = np.einsum("abc,abcd->d", xp[n, i:i + 3, j:j + 3], k) + b
    np.testing.assert_allclose(y, ref, rtol=1e-12, atol=1e-12)


def test_conv2d_chunked_path_matches(monkeypatch):
    rng = np.random.default_rng(5)
    x = Tensor(rng.normal(size=(6, 4, 4, 2)), requires_grad=True)
    k = Tensor(rng.normal(size=(3, 3, 2, 3)), requires_grad=True)
    full = ad.conv2d(x, k)
    full.sum().backward()
    gx, gk = x.grad.copy(), k.grad.copy()
    x.grad = k.grad = None
    monkeypatch.setattr("plumecast.autodiff.ops._COLS_BUDGET", 40)
    chunked = ad.conv2d(x, k)
    chunked.sum().backward()
    np.testing.assert_allclose(chunked.data, full.data, rtol=1e-12)
    np.testing.assert_allclose(x.grad, gx, rtol=1e-12)
    np.testing.assert_allclose(k.grad, gk, rtol=1e-12)
    assert _COLS_BUDGET > 40


def test_conv2d_channel_mismatch():
    with pytest.raises(ad.ShapeError):
        ad.conv2d(Tensor(np.zeros((1, 3, 3, 2))), Tensor(np.zeros((3, 3, 3, 1))))
    with pytest.raises(ad.ShapeError):
        ad.conv2d(Tensor(np.zeros((1, 3, 3, 2))), Tensor(np.zeros((2, 2, 2, 1))))


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("ksize", [1, 3])
def test_conv2d_gradients(seed, ksize):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 4, 4, 3))
    k = rng.normal(size=(ksize, ksize, 3, 2))
    b = rng.normal(size=2)
    probe = np.random.default_rng(100 + seed)
    w = Tensor(probe.normal(size=(2, 4, 4, 2)))
    err = finite_diff_check(lambda t: (ad.conv2d(*t) * w).sum(), [x, k, b])
    assert err < 1e-3


# -- ConvLSTM cell -------------------------------------------------------------

def convlstm_step(x, h, c, wx, wh, b):
    z = ad.conv2d(x, wx, b) + ad.conv2d(h, wh)
    return ad.lstm_cell(z, c)


def test_convlstm_zero_fixed_point():
    x = Tensor(np.zeros((1, 3, 3, 2)))
    h = Tensor(np.zeros((1, 3, 3, 4)))
    c = Tensor(np.zeros((1, 3, 3, 4)))
    hn, cn = convlstm_step(x, h, c, Tensor(np.zeros((3, 3, 2, 16))),
                           Tensor(np.zeros((3, 3, 4, 16))), Tensor(np.zeros(16)))
    assert not hn.data.any() and not cn.data.any()


def test_convlstm_closed_form_with_zero_weights():
    c0 = np.random.default_rng(1).normal(size=(2, 3, 3, 4)) * 3
    x = Tensor(np.random.default_rng(2).normal(size=(2, 3, 3, 2)))
    h = Tensor(np.random.default_rng(3).normal(size=(2, 3, 3, 4)))
    hn, cn = convlstm_step(x, h, Tensor(c0), Tensor(np.zeros((3, 3, 2, 16))),
                           Tensor(np.zeros((3, 3, 4, 16))), Tensor(np.zeros(16)))
    np.testing.assert_allclose(cn.data, 0.5 * c0, rtol=1e-14)
    np.testing.assert_allclose(hn.data, 0.5 * np.tanh(0.5 * c0), rtol=1e-14)


def test_lstm_cell_shape_mismatch():
    with pytest.raises(ad.ShapeError):
        ad.lstm_cell(Tensor(np.zeros((2, 7))))
    with pytest.raises(ad.ShapeError):
        ad.lstm_cell(Tensor(np.zeros((2, 8))), Tensor(np.zeros((2, 3))))


@pytest.mark.parametrize("seed", SEEDS)
def test_convlstm_gradients(seed):
    rng = np.random.default_rng(seed)
    arrays = [rng.normal(size=(2, 4, 4, 2)), rng.normal(size=(2, 4, 4, 3)),
              rng.normal(size=(2, 4, 4, 3)), 0.3 * rng.normal(size=(3, 3, 2, 12)),
              0.3 * rng.normal(size=(3, 3, 3, 12)), rng.normal(size=12)]
    probe = np.random.default_rng(50 + seed)
    wh = Tensor(probe.normal(size=(2, 4, 4, 3)))
    wc = Tensor(probe.normal(size=(2, 4, 4, 3)))

    def f(t):
        h, c = convlstm_step(*t)
        return (h * wh).sum() + (c * wc).sum()

    assert finite_diff_check(f, arrays) < 1e-3


def test_lstm_cell_unused_output_gets_zero_gradient():
    z = Tensor(np.random.default_rng(0).normal(size=(3, 8)), requires_grad=True)
    h, _ = ad.lstm_cell(z)
    h.sum().backward()
    assert z.grad.shape == (3, 8) and np.isfinite(z.grad).all()


# -- batch norm -----------------------------------------------------------------

def test_batch_norm_train_statistics():
    rng = np.random.default_rng(0)
    x = rng.normal(loc=3.0, scale=2.5, size=(4, 6, 6, 3))
    st = ad.BatchNormState(3, dtype=np.float64)
    y = ad.batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), st, training=True).data
    var = x.var(axis=(0, 1, 2))
    # eps = 1e-3 shrinks the variance slightly below one
    np.testing.assert_allclose(y.mean(axis=(0, 1, 2)), 0.0, atol=1e-5)
    np.testing.assert_allclose(y.var(axis=(0, 1, 2)), var / (var + 1e-3), atol=1e-5)
    np.testing.assert_allclose(st.running_mean, 0.01 * x.mean(axis=(0, 1, 2)), rtol=1e-12)
    np.testing.assert_allclose(st.running_var, 0.99 + 0.01 * var, rtol=1e-12)


def test_batch_norm_normalises_to_unit_variance_when_eps_negligible():
    x = np.random.default_rng(1).normal(scale=40.0, size=(8, 5, 5, 2))
    st = ad.BatchNormState(2, dtype=np.float64)
    y = ad.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), st, training=True).data
    np.testing.assert_allclose(y.var(axis=(0, 1, 2)), 1.0, atol=1e-5)


def test_batch_norm_infer_constant_input():
    st = ad.BatchNormState(2, dtype=np.float64)
    st.running_mean[:] = 7.0
    st.running_var[:] = 1.0
    y = ad.batch_norm(Tensor(np.full((1, 3, 3, 2), 7.0)), Tensor(np.ones(2)),
                      Tensor(np.zeros(2)), st, training=False)
    np.testing.assert_array_equal(y.data, 0.0)


def test_batch_norm_infer_uses_initial_stats():
    st = ad.BatchNormState(1, dtype=np.float64)
    x = np.array([[[[2.0]]]])
    y = ad.batch_norm(Tensor(x), Tensor(np.ones(1)), Tensor(np.zeros(1)), st, training=False)
    np.testing.assert_allclose(y.data, 2.0 / math.sqrt(1.0 + 1e-3))


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("training", [True, False])
def test_batch_norm_gradients(seed, training):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 4, 4, 2)) * 2 + 1
    gamma = rng.normal(size=2)
    beta = rng.normal(size=2)
    st = ad.BatchNormState(2, dtype=np.float64)
    st.running_mean[:] = rng.normal(size=2)
    st.running_var[:] = rng.uniform(0.5, 2, size=2)
    w = Tensor(np.random.default_rng(70 + seed).normal(size=x.shape))
    err = finite_diff_check(lambda t: (ad.batch_norm(t[0], t[1], t[2], st, training) * w).sum(),
                            [x, gamma, beta])
    assert err < 1e-3


# -- masked MSLE ---------------------------------------------------------------

def test_msle_zero_when_equal():
    t = np.abs(np.random.default_rng(0).normal(size=(3, 4))) * 10
    t[0, 0] = np.nan
    pred = np.nan_to_num(t, nan=123.0)
    loss, n = ad.masked_msle(Tensor(pred), t)
    assert float(loss.data) == 0.0 and n == 11


def test_msle_unit_value():
    t = np.full((2, 2), np.nan)
    t[1, 0] = 0.0
    pred = np.full((2, 2), 5.0)
    pred[1, 0] = math.e - 1.0
    loss, n = ad.masked_msle(Tensor(pred), t)
    assert n == 1
    assert float(loss.data) == pytest.approx(1.0, abs=1e-15)


def test_msle_all_masked():
    with pytest.raises(ad.NoValidCellsError):
        ad.masked_msle(Tensor(np.ones((2, 2))), np.full((2, 2), np.nan))


def test_msle_ignores_invalid_cell_values_and_is_permutation_invariant():
    rng = np.random.default_rng(4)
    t = rng.uniform(0, 50, size=(5, 5))
    t[rng.random((5, 5)) < 0.3] = np.nan
    p = rng.uniform(0, 50, size=(5, 5))
    base = float(ad.masked_msle(Tensor(p), t)[0].data)
    p2 = p.copy()
    p2[np.isnan(t)] = 1e6
    assert float(ad.masked_msle(Tensor(p2), t)[0].data) == base
    perm = rng.permutation(25)
    permuted = float(ad.masked_msle(Tensor(p.reshape(-1)[perm]), t.reshape(-1)[perm])[0].data)
    assert permuted == pytest.approx(base, rel=1e-14)


@pytest.mark.parametrize("seed", SEEDS)
def test_msle_gradients(seed):
    rng = np.random.default_rng(seed)
    t = rng.uniform(0, 30, size=(3, 4, 4))
    t[rng.random(t.shape) < 0.4] = np.nan
    p = rng.uniform(0.1, 30, size=t.shape)
    assert finite_diff_check(lambda x: ad.masked_msle(x[0], t)[0], [p]) < 1e-3


def test_msle_gradient_zero_on_masked_cells():
    t = np.array([[1.0, np.nan], [np.nan, 2.0]])
    p = Tensor(np.array([[3.0, 4.0], [5.0, 6.0]]), requires_grad=True)
    ad.masked_msle(p, t)[0].backward()
    assert p.grad[0, 1] == 0.0 and p.grad[1, 0] == 0.0 and p.grad[0, 0] != 0.0


# -- elementwise suite ---------------------------------------------------------

def test_relu_sigmoid_values():
    np.testing.assert_array_equal(ad.relu(Tensor(np.array([-1.0, 2.0]))).data, [0.0, 2.0])
    assert ad.sigmoid(Tensor(np.array(0.0))).data == 0.5


def test_fan_out_accumulates():
    x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    (x + x).sum().backward()
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])


def test_square_closed_form():
    err = finite_diff_check(lambda t: (t[0] * t[0]).sum(), [np.array(3.0)])
    assert err < 1e-9
    x = Tensor(np.array(3.0), requires_grad=True)
    (x * x).backward()
    assert x.grad == 6.0


ELEMENTWISE = {
    "relu": lambda t: ad.relu(t[0]),
    "sigmoid": lambda t: ad.sigmoid(t[0]),
    "tanh": lambda t: ad.tanh(t[0]),
    "log1p": lambda t: ad.log1p(t[0] * t[0]),
    "add_broadcast": lambda t: t[0] + t[1][0, 0],
    "mul_broadcast": lambda t: t[0] * t[1][:, :1],
    "sub": lambda t: t[0] - t[1],
    "concat": lambda t: ad.concat([t[0], t[1]], axis=1),
    "stack": lambda t: ad.stack([t[0], t[1]], axis=1),
    "slice": lambda t: t[0][1:, ::2],
    "reshape": lambda t: t[0].reshape(4, 3),
    "mean_axis": lambda t: t[0].mean(axis=0),
    "broadcast_to": lambda t: ad.broadcast_to(t[0][:1], (5, 3, 4)),
    "avg_pool": lambda t: ad.avg_pool2d(t[0].reshape(1, 2, 2, 3), 2),
    "upsample": lambda t: ad.upsample_nearest2d(t[0].reshape(1, 3, 4, 1), 2),
}


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("name", sorted(ELEMENTWISE))
def test_elementwise_gradients(name, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(3, 4))
    fn = ELEMENTWISE[name]
    shape = fn([Tensor(a), Tensor(b)]).shape
    w = Tensor(np.random.default_rng(seed + 9).normal(size=shape))
    assert finite_diff_check(lambda t: (fn(t) * w).sum(), [a, b]) < 1e-3


def test_concat_shape_error():
    with pytest.raises(ad.ShapeError):
        ad.concat([Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3)))], axis=1)
    with pytest.raises(ad.ShapeError):
        Tensor(np.zeros((2, 3))) + Tensor(np.zeros((3, 2)))


def test_pool_upsample_errors():
    with pytest.raises(ad.ShapeError):
        ad.avg_pool2d(Tensor(np.zeros((3, 3, 1))), 2)
    with pytest.raises(ad.ShapeError):
        ad.upsample_nearest2d(Tensor(np.zeros((3, 3, 1))), 0)


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        y = ad.tanh(x)
    assert y.node is None and not y.requires_grad


# -- Adam ----------------------------------------------------------------------

def test_adam_first_step():
    p = Tensor(np.zeros(1), requires_grad=True)
    opt = ad.Adam({"p": p})
    p.grad = np.ones(1)
    opt.step()
    # m_hat = 1, v_hat = 1, so the step is lr / (1 + eps)
    assert p.data[0] == pytest.approx(-0.001 / (1 + 1e-8), abs=1e-12)
    assert abs(p.data[0] + 0.001) < 1e-6


def test_adam_zero_gradient_keeps_parameters():
    p = Tensor(np.array([0.3, -2.0]), requires_grad=True)
    opt = ad.Adam({"p": p})
    for _ in range(10):
        p.grad = np.zeros(2)
        opt.step()
    np.testing.assert_array_equal(p.data, [0.3, -2.0])


def test_adam_constant_gradient_steps_equal():
    p = Tensor(np.zeros(1), requires_grad=True)
    opt = ad.Adam({"p": p})
    p.grad = np.full(1, 0.5)
    opt.step()
    d1 = -p.data[0]
    p.grad = np.full(1, 0.5)
    opt.step()
    d2 = -p.data[0] - d1
    assert abs(d2 - d1) / d1 < 0.01


def test_adam_rejects_non_finite():
    p = Tensor(np.zeros(2), requires_grad=True)
    opt = ad.Adam({"weights": p})
    p.grad = np.array([1.0, np.nan])
    with pytest.raises(ad.NonFiniteGradientError, match="weights"):
        opt.step()
    np.testing.assert_array_equal(p.data, 0.0)
    assert opt.step_count == 0


def test_determinism_of_forward():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 8, 8, 4)).astype(np.float32)
    k = rng.normal(size=(3, 3, 4, 8)).astype(np.float32)
    a = ad.conv2d(Tensor(x), Tensor(k)).data
    b = ad.conv2d(Tensor(x), Tensor(k)).data
    assert a.tobytes() == b.tobytes()


def test_gradcheck_flags_relu_kink_crossings():
    # 5e-5 lies within one step of the kink: the central difference sees slope 0.75
    x = np.array([5e-5, 0.3, -0.4])
    f = lambda t: ad.relu(t[0]).sum()  # noqa: E731
    assert finite_diff_check(f, [x]) > 0.1
    err, skipped = finite_diff_check(f, [x], skip_kinks=True, return_skipped=True)
    assert err < 1e-12
    assert skipped == 1


def test_gradcheck_zero_gradient_not_judged_on_rounding():
    # the bias is removed by training-mode normalisation: its exact gradient is zero
    rng = np.random.default_rng(0)
    x = rng.normal(size=(6, 3)) * 7.0
    bias = rng.normal(size=3)
    w = rng.normal(size=(6, 3))
    st = ad.BatchNormState(3, dtype=np.float64)
    f = lambda t: (ad.batch_norm(t[0] + t[1], np.ones(3), np.zeros(3), st, True) * w).sum() + 20.0  # noqa: E731
    assert finite_diff_check(f, [x, bias]) < 1e-3
