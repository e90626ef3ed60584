"""Backend selection for the hot kernels.

The compiled extension is used when it was built and importable; otherwise,
or when ``PLUMECAST_PURE_PYTHON=1`` is set, the numpy fallback is used. Both
backends share one signature per kernel, so callers never branch on it.
"""
import logging
import os

import numpy as np

from . import _fallback

logger = logging.getLogger(__name__)

_compiled = None
if os.environ.get("PLUMECAST_PURE_PYTHON", "0") not in ("1", "true", "yes"):
    try:
        from . import _ext as _compiled
    except ImportError:  # extension not built
        _compiled = None

BACKEND = "compiled" if _compiled is not None else "python"
_impl = _compiled if _compiled is not None else _fallback


def backends():
    """Return the available kernel modules keyed by name."""
    out = {"python": _fallback}
    if _compiled is not None:
        out["compiled"] = _compiled
    return out


def _c(a, dtype=None):
    return np.ascontiguousarray(a, dtype=dtype)


def im2col(xp, kh, kw):
    return _impl.im2col(_c(xp), kh, kw)


def col2im(cols, n, hp, wp, c, kh, kw):
    return _impl.col2im(_c(cols), n, hp, wp, c, kh, kw)


def lstm_forward(z, c_prev):
    return _impl.lstm_forward(_c(z), _c(c_prev, z.dtype))


def lstm_backward(act, c_prev, c, dh, dc):
    dt = act.dtype
    return _impl.lstm_backward(_c(act), _c(c_prev, dt), _c(c, dt), _c(dh, dt), _c(dc, dt))


def gaussian_accumulate(px, py, values, xs, ys, sigma, cutoff):
    f8 = np.float64
    return _impl.gaussian_accumulate(_c(px, f8), _c(py, f8), _c(values, f8),
                                     _c(xs, f8), _c(ys, f8), float(sigma), float(cutoff))


def advect_diffuse_step(conc, u_face, v_face, diff, dx, dt, emis, decay, n_steps=1,
                        open_boundary=False):
    f8 = np.float64
    return _impl.advect_diffuse_step(_c(conc, f8), _c(u_face, f8), _c(v_face, f8),
                                     float(diff), float(dx), float(dt),
                                     _c(emis, f8), _c(decay, f8), int(n_steps),
                                     bool(open_boundary))
