import numpy as np
import pytest

from plumecast import autodiff as ad
from plumecast.autodiff import ShapeError, Tensor, finite_diff_check
from plumecast.geo import GeoPoint, GridSpec
from plumecast.layers import ConvLSTM, ParamStore
from plumecast.model import (
    ModelConfig,
    ModelConfigError,
    ScaleUnit,
    ScaleUnitConfig,
    UNetForecaster,
    spatial_scaling,
)

CENTER = GeoPoint(48.85, 2.35)


def count_params_by_hand(k=3, n_pol=4, hi_hist=11, hi_const=2, lo_hist=8, lo_fcst=10):
    """Layer-by-layer count over the filter table, written out independently of the model code."""
    def conv(cin, cout, ks=k):
        return ks * ks * cin * cout + cout

    def bn(c):
        return 2 * c

    def lstm(cin, ch):
        return k * k * (cin + ch) * 4 * ch + 4 * ch

    total = 0
    # high-res units: hist (8, 16), const 1, decoder D, fed by the next-coarser decoder
    for dec, lower in ((8, 32), (32, 64), (64, 64)):
        total += conv(hi_hist, 8) + bn(8) + lstm(8, 16) + bn(16)
        total += conv(hi_const, 1) + bn(1)
        total += conv(16 + 1 + lower, dec) + bn(dec)
        total += conv(dec, n_pol, ks=1)
    # low-res unit: hist (16, 32), forecast (64, 32), decoder 64
    total += conv(lo_hist, 16) + bn(16) + lstm(16, 32) + bn(32)
    total += lstm(lo_fcst, 64) + bn(64) + lstm(64, 32) + bn(32)
    total += conv(32 + 32, 64) + bn(64)
    total += conv(64, n_pol, ks=1)
    return total


def toy_config(**kw):
    units = (
        ScaleUnitConfig("hi0", 50.0, (2, 3), 1, None, 2, True),
        ScaleUnitConfig("hi1", 100.0, (2, 3), 1, None, 2, True),
        ScaleUnitConfig("hi2", 200.0, (2, 3), 1, None, 3, True),
        ScaleUnitConfig("lo0", 20000.0, (2, 3), None, (2, 2), 3, False),
    )
    base = dict(n_in=3, n_out=2, hi_size=8, lo_size=4, scale_units=units)
    base.update(kw)
    return ModelConfig(**base)


def toy_inputs(cfg, rng, batch=1, dtype=np.float64):
    n, m = cfg.hi_size, cfg.lo_size
    shapes = [(batch, cfg.n_in, n, n, cfg.hi_hist_channels), (batch, n, n, cfg.hi_const_channels),
              (batch, cfg.n_in, m, m, cfg.lo_hist_channels), (batch, cfg.n_out, m, m, cfg.lo_fcst_channels)]
    return [rng.normal(size=s).astype(dtype) for s in shapes]


def test_default_filters_match_table():
    cfg = ModelConfig()
    rows = {u.name: (u.historical_encoder_filters, u.constant_encoder_filters,
                     u.forecast_encoder_filters, u.decoder_filters) for u in cfg.scale_units}
    assert rows == {
        "hi0": ((8, 16), 1, None, 8),
        "hi1": ((8, 16), 1, None, 32),
        "hi2": ((8, 16), 1, None, 64),
        "lo0": ((16, 32), None, (64, 32), 64),
    }
    assert (cfg.n_pol, cfg.n_in, cfg.n_out, cfg.kernel_size) == (4, 24, 24, 3)


def test_parameter_count_matches_hand_count():
    assert UNetForecaster(ModelConfig()).n_parameters() == count_params_by_hand()


def test_default_output_shapes():
    model = UNetForecaster(ModelConfig())
    rng = np.random.default_rng(0)
    with ad.no_grad():
        out = model(*toy_inputs(model.cfg, rng, dtype=np.float32))
    assert {k: v.shape for k, v in out.items()} == {
        50.0: (1, 24, 64, 64, 4), 100.0: (1, 24, 32, 32, 4),
        200.0: (1, 24, 16, 16, 4), 20000.0: (1, 24, 20, 20, 4)}
    for v in out.values():
        assert np.all(v.data >= 0)


def test_encoder_shapes_default_hi0_and_lo0():
    model = UNetForecaster(ModelConfig())
    rng = np.random.default_rng(1)
    with ad.no_grad():
        hist = model.hi["hi0"].encode_historical(rng.normal(size=(1, 24, 64, 64, 11)).astype(np.float32))
        const = model.hi["hi0"].encode_constant(rng.normal(size=(1, 64, 64, 2)).astype(np.float32))
        fc = model.lo0.encode_forecast(rng.normal(size=(1, 24, 20, 20, 10)).astype(np.float32))
    assert hist.shape == (1, 24, 64, 64, 16)
    assert const.shape == (1, 24, 64, 64, 1)
    assert fc.shape == (1, 24, 20, 20, 32)
    for t in range(1, 24):
        np.testing.assert_array_equal(const.data[:, t], const.data[:, 0])
        np.testing.assert_array_equal(hist.data[:, t], hist.data[:, 0])


def test_zero_inputs_and_parameters_give_zero_forecasts():
    cfg = toy_config()
    model = UNetForecaster(cfg, dtype=np.float64)
    for p in model.params.values():
        p.data[...] = 0.0
    zeros = [np.zeros_like(a) for a in toy_inputs(cfg, np.random.default_rng(0))]
    out = model(*zeros)
    for v in out.values():
        assert np.all(v.data == 0.0)


def test_zero_weights_encoders_give_zero():
    cfg = toy_config()
    model = UNetForecaster(cfg, dtype=np.float64)
    for p in model.params.values():
        p.data[...] = 0.0
    x = np.zeros((1, 2, 4, 4, cfg.lo_fcst_channels))
    assert np.all(model.lo0.encode_forecast(x).data == 0.0)
    assert np.all(model.lo0.encode_historical(np.zeros((1, 3, 4, 4, 8))).data == 0.0)


def _unit(cfg, hist_in=3, const_in=2, fcst_in=0, lower_in=0, seed=0):
    store = ParamStore(np.random.default_rng(seed), np.float64)
    return ScaleUnit(store, cfg, 2, 3, 3, hist_in, const_in, fcst_in, lower_in), store


@pytest.mark.parametrize("seed", range(5))
def test_scale_unit_gradient_check(seed):
    cfg = ScaleUnitConfig("toy", 50.0, (2, 3), 2, (2, 2), 3, True)
    unit, store = _unit(cfg, fcst_in=2, lower_in=2, seed=seed)
    rng = np.random.default_rng(100 + seed)
    hist = rng.normal(size=(2, 3, 4, 4, 3))
    const = rng.normal(size=(2, 4, 4, 2))
    fcst = rng.normal(size=(2, 3, 4, 4, 2))
    lower = rng.normal(size=(2, 3, 4, 4, 2))
    w = rng.normal(size=(2, 3, 4, 4, 2))

    def f(ts):
        fc, dec = unit(ts[0], ts[1], ts[2], ts[3], training=True)
        return (fc * w).sum() + dec.sum() * 0.1

    params = list(store.params.values())
    err, skipped = finite_diff_check(f, [hist, const, fcst, lower] + params, max_coords=6,
                                     rng=rng, skip_kinks=True, return_skipped=True)
    assert err < 1e-3
    assert skipped <= 3


def test_encoder_gradient_checks():
    cfg = ScaleUnitConfig("toy", 50.0, (2, 3), 2, (2, 2), 3, True)
    unit, store = _unit(cfg, fcst_in=2, lower_in=2, seed=7)
    rng = np.random.default_rng(7)
    hist = rng.normal(size=(2, 4, 4, 4, 3))
    const = rng.normal(size=(2, 4, 4, 2))
    fcst = rng.normal(size=(2, 3, 4, 4, 2))
    params = list(store.params.values())
    w3 = rng.normal(size=(2, 3, 4, 4, 3))
    w2 = rng.normal(size=(2, 3, 4, 4, 2))
    checks = [
        (lambda t: (unit.encode_historical(t[0], training=True) * w3).sum(), hist),
        (lambda t: (unit.encode_constant(t[0], training=True) * w2).sum(), const),
        (lambda t: (unit.encode_forecast(t[0], training=True) * w2).sum(), fcst),
    ]
    for f, x in checks:
        err, skipped = finite_diff_check(f, [x] + params, max_coords=5, rng=rng,
                                         skip_kinks=True, return_skipped=True)
        assert err < 1e-3
        assert skipped <= 3


def test_split_decoder_equals_concatenated_convolution():
    cfg = ScaleUnitConfig("toy", 50.0, (2, 3), 2, (2, 2), 3, True)
    unit, _ = _unit(cfg, fcst_in=2, lower_in=2, seed=3)
    rng = np.random.default_rng(3)
    hist = rng.normal(size=(2, 3, 5, 5, 3))
    const = rng.normal(size=(2, 5, 5, 2))
    fcst = rng.normal(size=(2, 3, 5, 5, 2))
    lower = rng.normal(size=(2, 3, 5, 5, 2))
    _, dec = unit(hist, const, fcst, lower, training=False)
    # reference: concatenate [hist | const | fcst | lower] per time step, then one convolution
    streams = [unit.encode_historical(hist).data, unit.encode_constant(const).data,
               unit.encode_forecast(fcst).data, lower]
    cat = np.concatenate(streams, axis=-1).reshape(6, 5, 5, -1)
    z = ad.conv2d(cat, unit.dec.kernel.data, unit.dec.bias.data).data.reshape(2, 3, 5, 5, -1)
    st = unit.dec_bn.state
    ref = (z - st.running_mean) / np.sqrt(st.running_var + st.eps)
    ref = np.maximum(ref * unit.dec_bn.gamma.data + unit.dec_bn.beta.data, 0.0)
    np.testing.assert_allclose(dec.data, ref, rtol=1e-12, atol=1e-12)


def test_full_model_gradient_check():
    cfg = toy_config()
    model = UNetForecaster(cfg, seed=5, dtype=np.float64)
    rng = np.random.default_rng(5)
    inputs = toy_inputs(cfg, rng, batch=2)
    weights = {r: rng.normal(size=v) for r, v in
               {50.0: (2, 2, 8, 8, 4), 100.0: (2, 2, 4, 4, 4), 200.0: (2, 2, 2, 2, 4),
                20000.0: (2, 2, 4, 4, 4)}.items()}

    def f(ts):
        out = model(*ts[:4], training=True)
        total = None
        for r, v in out.items():
            term = (v * weights[r]).sum()
            total = term if total is None else total + term
        return total

    params = list(model.params.values())
    err, skipped = finite_diff_check(f, inputs + params, max_coords=3, rng=rng,
                                     skip_kinks=True, return_skipped=True)
    assert err < 1e-3
    assert skipped <= 5


def test_forecasts_nonnegative_random():
    cfg = toy_config()
    for seed in range(5):
        model = UNetForecaster(cfg, seed=seed, dtype=np.float64)
        for p in model.params.values():
            p.data[...] = np.random.default_rng(seed).normal(size=p.data.shape)
        out = model(*toy_inputs(cfg, np.random.default_rng(seed)))
        for v in out.values():
            assert np.all(v.data >= 0.0)


def test_lower_decoded_path_is_wired():
    cfg = toy_config()
    model = UNetForecaster(cfg, seed=2, dtype=np.float64)
    rng = np.random.default_rng(2)
    hh, hc, lh, lf = toy_inputs(cfg, rng)
    unit = model.hi["hi0"]
    lower = rng.normal(size=(1, 2, 8, 8, cfg.unit("hi1").decoder_filters))
    a, _ = unit(hh, hc, lower=lower)
    b, _ = unit(hh, hc, lower=np.zeros_like(lower))
    assert np.max(np.abs(a.data - b.data)) > 0
    # the same holds end to end: perturbing only the low-res inputs moves the 50 m output
    o1 = model(hh, hc, lh, lf)[50.0].data
    o2 = model(hh, hc, lh + 1.0, lf)[50.0].data
    assert np.max(np.abs(o1 - o2)) > 0


def test_translation_covariance_interior():
    cfg = ScaleUnitConfig("toy", 50.0, (2, 3), 2, None, 3, True)
    unit, _ = _unit(cfg, lower_in=2, seed=4)
    rng = np.random.default_rng(4)
    n, t = 20, 3
    hist = rng.normal(size=(1, t, n, n, 3))
    const = rng.normal(size=(1, n, n, 2))
    lower = rng.normal(size=(1, 3, n, n, 2))
    shift = (lambda a: np.roll(a, 1, axis=-2))
    a, _ = unit(hist, const, lower=lower)
    b, _ = unit(shift(hist), shift(const), lower=shift(lower))
    m = 7  # beyond the receptive field growth of the stacked convolutions
    np.testing.assert_allclose(b.data[..., m:n - m, m + 1:n - m + 1, :],
                               a.data[..., m:n - m, m:n - m, :], rtol=1e-12, atol=1e-12)


def test_convlstm_runs_on_any_grid_size():
    store = ParamStore(np.random.default_rng(0), np.float64)
    layer = ConvLSTM(store, "l", 2, 3)
    before = {k: v.data.copy() for k, v in store.params.items()}
    assert layer(Tensor(np.ones((1, 2, 8, 8, 2)))).shape == (1, 2, 8, 8, 3)
    assert layer(Tensor(np.ones((1, 2, 5, 7, 2)))).shape == (1, 2, 5, 7, 3)
    assert set(store.params) == set(before)


def test_missing_mandatory_stream_is_config_error():
    cfg = ScaleUnitConfig("toy", 50.0, (2, 3), 2, None, 3, True)
    unit, _ = _unit(cfg, lower_in=2)
    hist = np.zeros((1, 3, 4, 4, 3))
    with pytest.raises(ModelConfigError):
        unit(hist, np.zeros((1, 4, 4, 2)))
    with pytest.raises(ModelConfigError):
        unit(None, np.zeros((1, 4, 4, 2)), lower=np.zeros((1, 3, 4, 4, 2)))


def test_shape_mismatch_names_junction():
    cfg = ScaleUnitConfig("hi9", 50.0, (2, 3), 2, None, 3, True)
    unit, _ = _unit(cfg, lower_in=2)
    with pytest.raises(ShapeError, match="hi9"):
        unit(np.zeros((1, 3, 4, 4, 3)), np.zeros((1, 4, 4, 2)), lower=np.zeros((1, 3, 2, 2, 2)))
    model = UNetForecaster(toy_config())
    bad = toy_inputs(model.cfg, np.random.default_rng(0), dtype=np.float32)
    bad[0] = bad[0][:, :, :4]
    with pytest.raises(ShapeError):
        model(*bad)


def test_spatial_scaling_constant_and_mean():
    lo = GridSpec(CENTER, 20000.0, 20, 20)
    hi = GridSpec(CENTER, 200.0, 16, 16)
    const = np.full((2, 20, 20, 3), 4.25)
    out = spatial_scaling(const, lo, hi)
    assert out.shape == (2, 16, 16, 3)
    assert np.all(out.data == 4.25)
    # co-centred: the 3.2 km support straddles the central 2x2 block of 20 km cells
    field = np.zeros((1, 20, 20, 1))
    field[0, 9:11, 9:11, 0] = [[1.0, 2.0], [3.0, 4.0]]
    assert np.all(spatial_scaling(field, lo, hi).data == 2.5)


def test_spatial_scaling_single_cell_when_aligned():
    lo = GridSpec(CENTER, 20000.0, 21, 21)
    hi = GridSpec(CENTER, 200.0, 16, 16)
    field = np.arange(21 * 21, dtype=float).reshape(1, 21, 21, 1)
    assert np.all(spatial_scaling(field, lo, hi).data == field[0, 10, 10, 0])


def test_fingerprint_stable_and_sensitive():
    a, b = ModelConfig(), ModelConfig()
    assert a.fingerprint() == b.fingerprint()
    assert ModelConfig.from_dict(a.to_dict()) == a
    assert toy_config().fingerprint() != a.fingerprint()


def test_peephole_reserved():
    with pytest.raises(ModelConfigError):
        ModelConfig(peephole=True)
