"""Multi-resolution convolutional-recurrent forecaster.

Every unit runs on one grid and is made of up to three encoders (historical,
constant, forecast), a decoder and a 1x1 forecasting head. Four units form the
network: three high-resolution units (50 m, 100 m, 200 m) chained through
nearest-neighbour upsampling of decoded features, and one low-resolution unit
(20 km) whose decoded features are cropped, averaged and broadcast into the
coarsest high-resolution unit.

All tensors carry a leading batch axis: sequences are ``(B, T, H, W, C)`` and
static maps ``(B, H, W, C)``.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .autodiff.tensor import as_tensor
from .geo import GeoPoint, GridSpec, covering_window
from .layers import BatchNorm, Conv2D, ConvLSTM, ParamStore


class ModelConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ScaleUnitConfig:
    name: str
    resolution_m: float
    historical_encoder_filters: Tuple[int, int]
    constant_encoder_filters: Optional[int]
    forecast_encoder_filters: Optional[Tuple[int, int]]
    decoder_filters: int
    accepts_lower_decoded: bool


def _default_units():
    return (
        ScaleUnitConfig("hi0", 50.0, (8, 16), 1, None, 8, True),
        ScaleUnitConfig("hi1", 100.0, (8, 16), 1, None, 32, True),
        ScaleUnitConfig("hi2", 200.0, (8, 16), 1, None, 64, True),
        ScaleUnitConfig("lo0", 20000.0, (16, 32), None, (64, 32), 64, False),
    )


@dataclass(frozen=True)
class ModelConfig:
    n_pol: int = 4
    n_in: int = 24
    n_out: int = 24
    hi_size: int = 64
    hi_resolution_m: float = 50.0
    lo_size: int = 20
    lo_resolution_m: float = 20000.0
    kernel_size: int = 3
    hi_hist_channels: int = 11
    hi_const_channels: int = 2
    lo_hist_channels: int = 8
    lo_fcst_channels: int = 10
    peephole: bool = False
    scale_units: Tuple[ScaleUnitConfig, ...] = field(default_factory=_default_units)

    def __post_init__(self):
        names = [u.name for u in self.scale_units]
        if names != ["hi0", "hi1", "hi2", "lo0"]:
            raise ModelConfigError(f"scale units must be hi0, hi1, hi2, lo0; got {names}")
        if self.peephole:
            raise ModelConfigError("peephole connections are not implemented")
        if self.kernel_size % 2 != 1:
            raise ModelConfigError("kernel_size must be odd")
        if self.hi_size % 4:
            raise ModelConfigError("hi_size must be divisible by 4")
        for u in self.scale_units:
            if u.name.startswith("hi") and not u.accepts_lower_decoded:
                raise ModelConfigError(f"{u.name} must accept lower decoded features")
            if u.name == "lo0" and u.forecast_encoder_filters is None:
                raise ModelConfigError("lo0 needs a forecast encoder")

    def unit(self, name) -> ScaleUnitConfig:
        for u in self.scale_units:
            if u.name == name:
                return u
        raise KeyError(name)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["scale_units"] = [dataclasses.asdict(u) for u in self.scale_units]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "scale_units" in d:
            units = []
            for u in d["scale_units"]:
                u = dict(u)
                u["historical_encoder_filters"] = tuple(u["historical_encoder_filters"])
                if u.get("forecast_encoder_filters") is not None:
                    u["forecast_encoder_filters"] = tuple(u["forecast_encoder_filters"])
                units.append(ScaleUnitConfig(**u))
            d["scale_units"] = tuple(units)
        return cls(**d)

    def fingerprint(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()

    def hi_grid(self, center: GeoPoint, level=0) -> GridSpec:
        f = 2 ** level
        return GridSpec(center, self.hi_resolution_m * f, self.hi_size // f, self.hi_size // f)

    def lo_grid(self, center: GeoPoint) -> GridSpec:
        return GridSpec(center, self.lo_resolution_m, self.lo_size, self.lo_size)


def _check(x, ndim, channels, what):
    if x.ndim != ndim or x.shape[-1] != channels:
        raise ShapeError(f"{what}: expected {ndim}-D input with {channels} channels, got {x.shape}")


HEAD_INIT_GAIN = 0.1


class ScaleUnit:
    """Encoders, decoder and head operating on a single grid."""

    def __init__(self, store: ParamStore, cfg: ScaleUnitConfig, n_pol, n_out, k,
                 hist_in, const_in=0, fcst_in=0, lower_in=0):
        self.cfg, self.n_out = cfg, n_out
        self.hist_in, self.const_in, self.fcst_in, self.lower_in = hist_in, const_in, fcst_in, lower_in
        p = cfg.name
        f1, f2 = cfg.historical_encoder_filters
        self.hist_conv = Conv2D(store, f"{p}.hist.conv", hist_in, f1, k)
        self.hist_bn1 = BatchNorm(store, f"{p}.hist.conv_bn", f1)
        self.hist_lstm = ConvLSTM(store, f"{p}.hist.lstm", f1, f2, k)
        self.hist_bn2 = BatchNorm(store, f"{p}.hist.lstm_bn", f2)
        static = f2
        if cfg.constant_encoder_filters:
            fc = cfg.constant_encoder_filters
            self.const_conv = Conv2D(store, f"{p}.const.conv", const_in, fc, k)
            self.const_bn = BatchNorm(store, f"{p}.const.bn", fc)
            static += fc
        dynamic = 0
        if cfg.forecast_encoder_filters:
            g1, g2 = cfg.forecast_encoder_filters
            self.fcst_lstm1 = ConvLSTM(store, f"{p}.fcst.lstm1", fcst_in, g1, k)
            self.fcst_bn1 = BatchNorm(store, f"{p}.fcst.lstm1_bn", g1)
            self.fcst_lstm2 = ConvLSTM(store, f"{p}.fcst.lstm2", g1, g2, k)
            self.fcst_bn2 = BatchNorm(store, f"{p}.fcst.lstm2_bn", g2)
            dynamic += g2
        if cfg.accepts_lower_decoded:
            dynamic += lower_in
        self.static_channels, self.dynamic_channels = static, dynamic
        d = cfg.decoder_filters
        # one kernel over [hist | const | fcst | lower]; split at apply time
        self.dec = Conv2D(store, f"{p}.decoder.conv", static + dynamic, d, k)
        self.dec_bn = BatchNorm(store, f"{p}.decoder.bn", d)
        self.head = Conv2D(store, f"{p}.head.conv", d, n_pol, 1)
        # start every forecast near output_scale: bias 1 keeps the relu active and
        # small weights keep the spread narrow
        self.head.bias.data[:] = 1.0
        self.head.kernel.data *= HEAD_INIT_GAIN

    # -- encoders -----------------------------------------------------------
    def historical_state(self, x, training):
        """Final encoded historical state ``(B, H, W, F2)``."""
        _check(x, 5, self.hist_in, f"{self.cfg.name} historical input")
        y = ad.relu(self.hist_bn1(self.hist_conv(x), training))
        return self.hist_bn2(self.hist_lstm(y, return_sequences=False), training)

    def encode_historical(self, x, training=False):
        h = self.historical_state(x, training)
        return ad.broadcast_to(ad.reshape(h, (h.shape[0], 1) + h.shape[1:]),
                               (h.shape[0], self.n_out) + h.shape[1:])

    def constant_state(self, x, training):
        _check(x, 4, self.const_in, f"{self.cfg.name} constant input")
        return ad.relu(self.const_bn(self.const_conv(x), training))

    def encode_constant(self, x, training=False):
        h = self.constant_state(x, training)
        return ad.broadcast_to(ad.reshape(h, (h.shape[0], 1) + h.shape[1:]),
                               (h.shape[0], self.n_out) + h.shape[1:])

    def encode_forecast(self, x, training=False):
        _check(x, 5, self.fcst_in, f"{self.cfg.name} forecast input")
        if x.shape[1] != self.n_out:
            raise ShapeError(f"{self.cfg.name} forecast input has {x.shape[1]} steps, "
                             f"expected {self.n_out}")
        y = self.fcst_bn1(self.fcst_lstm1(x), training)
        return self.fcst_bn2(self.fcst_lstm2(y), training)

    # -- full unit ----------------------------------------------------------
    def __call__(self, hist, const=None, fcst=None, lower=None, training=False):
        """Return ``(forecasts, decoded)``, both ``(B, N_out, H, W, .)``."""
        cfg = self.cfg
        if hist is None:
            raise ModelConfigError(f"{cfg.name}: historical input is mandatory")
        if (const is None) != (not cfg.constant_encoder_filters):
            raise ModelConfigError(f"{cfg.name}: constant input presence does not match config")
        if (fcst is None) != (not cfg.forecast_encoder_filters):
            raise ModelConfigError(f"{cfg.name}: forecast input presence does not match config")
        if (lower is None) == cfg.accepts_lower_decoded:
            raise ModelConfigError(f"{cfg.name}: lower decoded input presence does not match config")

        static = [self.historical_state(hist, training)]
        if const is not None:
            static.append(self.constant_state(const, training))
        dynamic = []
        if fcst is not None:
            dynamic.append(self.encode_forecast(fcst, training))
        if lower is not None:
            _check(lower, 5, self.lower_in, f"{cfg.name} lower decoded input")
            dynamic.append(lower)
        b, h, w = static[0].shape[:3]
        for t in dynamic:
            if t.shape[:2] != (b, self.n_out) or t.shape[2:4] != (h, w):
                raise ShapeError(f"{cfg.name}: stream of shape {t.shape} does not match "
                                 f"grid {(b, self.n_out, h, w)}")

        # The decoder convolution is linear in its input channels, so the
        # time-invariant streams are convolved once and broadcast over time.
        s = self.static_channels
        xs = ad.concat(static, axis=-1) if len(static) > 1 else static[0]
        zs = ad.conv2d(xs, self.dec.kernel[:, :, :s, :], self.dec.bias)
        zs = ad.reshape(zs, (b, 1, h, w, zs.shape[-1]))
        if dynamic:
            xd = ad.concat(dynamic, axis=-1) if len(dynamic) > 1 else dynamic[0]
            zd = ad.conv2d(xd.reshape(b * self.n_out, h, w, self.dynamic_channels),
                           self.dec.kernel[:, :, s:, :])
            z = zs + zd.reshape(b, self.n_out, h, w, zd.shape[-1])
        else:
            z = ad.broadcast_to(zs, (b, self.n_out, h, w, zs.shape[-1]))
        decoded = ad.relu(self.dec_bn(z, training))
        forecasts = ad.relu(self.head(decoded))
        return forecasts, decoded


def spatial_scaling(lo_decoded, lo_grid: GridSpec, hi_grid: GridSpec):
    """Crop the coarse cells covering ``hi_grid``, average them, broadcast to ``hi_grid``.

    ``lo_decoded`` is ``(..., H_lo, W_lo, D)``; the result is ``(..., H_hi, W_hi, D)``.
    """
    lo_decoded = ad.Tensor(lo_decoded) if not isinstance(lo_decoded, Tensor) else lo_decoded
    if lo_decoded.shape[-3:-1] != (lo_grid.height, lo_grid.width):
        raise ShapeError(f"low-res features {lo_decoded.shape} do not match grid "
                         f"{(lo_grid.height, lo_grid.width)}")
    r0, r1, c0, c1 = covering_window(lo_grid, hi_grid)
    idx = (Ellipsis, slice(r0, r1), slice(c0, c1), slice(None))
    crop = lo_decoded[idx]
    avg = ad.mean(crop, axis=(-3, -2), keepdims=True)
    lead = lo_decoded.shape[:-3]
    return ad.broadcast_to(avg, lead + (hi_grid.height, hi_grid.width, lo_decoded.shape[-1]))


class UNetForecaster:
    """Parameters, batch-norm states and forward pass of the full network."""

    def __init__(self, cfg: ModelConfig = None, seed=0, dtype=np.float32):
        self.cfg = cfg = cfg or ModelConfig()
        self.dtype = np.dtype(dtype)
        self.store = ParamStore(np.random.default_rng(seed), dtype)
        k = cfg.kernel_size
        lo = cfg.unit("lo0")
        self.lo0 = ScaleUnit(self.store, lo, cfg.n_pol, cfg.n_out, k,
                             cfg.lo_hist_channels, fcst_in=cfg.lo_fcst_channels)
        self.hi = {}
        lower = lo.decoder_filters
        for name in ("hi2", "hi1", "hi0"):
            u = cfg.unit(name)
            self.hi[name] = ScaleUnit(self.store, u, cfg.n_pol, cfg.n_out, k,
                                      cfg.hi_hist_channels, const_in=cfg.hi_const_channels,
                                      lower_in=lower)
            lower = u.decoder_filters
        # per-pollutant output multiplier (typical concentration); not trained
        self.output_scale = np.ones(cfg.n_pol, dtype=dtype)
        center = GeoPoint(0.0, 0.0)
        self._window = covering_window(cfg.lo_grid(center), cfg.hi_grid(center, 2))

    @property
    def params(self) -> Dict[str, Tensor]:
        return self.store.params

    @property
    def bn_states(self):
        return self.store.bn

    def n_parameters(self):
        return int(sum(p.data.size for p in self.params.values()))

    def _scaled(self, f):
        return ad.mul(f, Tensor(self.output_scale))

    def forward(self, hi_hist, hi_const, lo_hist, lo_fcst, training=False):
        """Map ``resolution_m -> (B, N_out, H_R, W_R, N_pol)`` forecasts.

        Inputs: ``hi_hist (B, N_in, 64, 64, C)``, ``hi_const (B, 64, 64, C)``,
        ``lo_hist (B, N_in, 20, 20, C)``, ``lo_fcst (B, N_out, 20, 20, C)``.
        """
        cfg = self.cfg
        hi_hist, hi_const, lo_hist, lo_fcst = (as_tensor(a) for a in
                                               (hi_hist, hi_const, lo_hist, lo_fcst))
        n = cfg.hi_size
        if hi_hist.shape[2:4] != (n, n) or hi_const.shape[1:3] != (n, n):
            raise ShapeError(f"high-res inputs must be {n}x{n}: {hi_hist.shape}, {hi_const.shape}")
        if lo_hist.shape[2:4] != (cfg.lo_size,) * 2 or lo_fcst.shape[2:4] != (cfg.lo_size,) * 2:
            raise ShapeError(f"low-res inputs must be {cfg.lo_size}x{cfg.lo_size}")

        lo_fc, lo_dec = self.lo0(lo_hist, fcst=lo_fcst, training=training)
        r0, r1, c0, c1 = self._window
        crop = lo_dec[:, :, r0:r1, c0:c1, :]
        avg = ad.mean(crop, axis=(-3, -2), keepdims=True)
        lower = ad.broadcast_to(avg, avg.shape[:2] + (n // 4, n // 4, avg.shape[-1]))

        out = {cfg.lo_resolution_m: self._scaled(lo_fc)}
        for level, name in ((2, "hi2"), (1, "hi1"), (0, "hi0")):
            f = 2 ** level
            hh = ad.avg_pool2d(hi_hist, f) if f > 1 else hi_hist
            hc = ad.avg_pool2d(hi_const, f) if f > 1 else hi_const
            fc, dec = self.hi[name](hh, hc, lower=lower, training=training)
            out[cfg.hi_resolution_m * f] = self._scaled(fc)
            lower = ad.upsample_nearest2d(dec, 2) if level else None
        return out

    __call__ = forward

    @property
    def resolutions(self) -> Tuple[float, ...]:
        """Output resolutions in metres, in the order :meth:`forward` produces them."""
        cfg = self.cfg
        return (cfg.lo_resolution_m,) + tuple(cfg.hi_resolution_m * 2 ** lv for lv in (2, 1, 0))

    def set_state_arrays(self, arrays: Dict[str, np.ndarray]):
        """Load parameters (``param/<name>``), BN stats (``bn/<name>/mean|var``), ``output_scale``."""
        for k, p in self.params.items():
            a = arrays[f"param/{k}"]
            if a.shape != p.data.shape:
                raise ShapeError(f"parameter {k}: stored {a.shape}, expected {p.data.shape}")
            p.data[...] = a
        for k, st in self.bn_states.items():
            st.running_mean[...] = arrays[f"bn/{k}/mean"]
            st.running_var[...] = arrays[f"bn/{k}/var"]
        self.output_scale[...] = arrays["output_scale"]

    def state_arrays(self) -> Dict[str, np.ndarray]:
        out = {f"param/{k}": p.data for k, p in self.params.items()}
        for k, st in self.bn_states.items():
            out[f"bn/{k}/mean"] = st.running_mean
            out[f"bn/{k}/var"] = st.running_var
        out["output_scale"] = self.output_scale
        return out


def unet_forward(model: UNetForecaster, hi_hist, hi_const, lo_hist, lo_fcst, training=False):
    return model.forward(hi_hist, hi_const, lo_hist, lo_fcst, training=training)
