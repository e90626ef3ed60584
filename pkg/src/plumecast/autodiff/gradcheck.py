"""Central finite-difference verification of reverse-mode gradients."""
from __future__ import annotations

import numpy as np

from . import ops
from .tensor import Tensor

STEP = 1e-4
# gradients whose magnitude is within this factor of the central-difference
# roundoff level are compared against that level instead of their own size
NOISE_MARGIN = 1e4


def fd_noise_floor(f_value, step=STEP):
    """Magnitude below which a central difference of ``f`` is dominated by rounding."""
    return float(np.finfo(np.float64).eps * max(1.0, abs(f_value)) / step)


def relative_error(g_ad, g_fd, floor=1e-8):
    return np.abs(g_ad - g_fd) / np.maximum(floor, np.abs(g_ad) + np.abs(g_fd))


def finite_diff_check(f, inputs, step=STEP, max_coords=None, rng=None, skip_kinks=False,
                      return_skipped=False):
    """Largest relative error between autodiff and central-difference gradients.

    Args:
        f: callable mapping a list of :class:`Tensor` to a scalar Tensor.
        inputs: list of float64 arrays (or Tensors) to differentiate against.
            Tensors are used as-is, so model parameters can be checked in place.
        step: central difference half-width.
        max_coords: if set, only this many randomly chosen coordinates per input
            are perturbed (all coordinates otherwise).
        rng: generator used for coordinate sub-sampling.
        skip_kinks: skip coordinates whose +/- perturbations put any relu
            input on different sides of zero. A central difference across a
            kink does not estimate the derivative at the point.
        return_skipped: also return the number of skipped coordinates.

    Returns:
        The maximum of ``|g_ad - g_fd| / max(floor, |g_ad| + |g_fd|)`` over all
        checked coordinates, where ``floor`` is ``NOISE_MARGIN`` times the
        rounding noise of a central difference of ``f`` (and at least 1e-8).
        Without the floor an exactly-zero gradient (a bias feeding a
        training-mode batch norm, say) is judged on pure rounding noise.
    """
    tensors = []
    for x in inputs:
        t = x if isinstance(x, Tensor) else Tensor(np.array(x, dtype=np.float64))
        if t.data.dtype != np.float64:
            raise TypeError("finite_diff_check runs in 64-bit mode; got " + str(t.data.dtype))
        t.requires_grad = True
        t.grad = None
        tensors.append(t)

    out = f(tensors)
    floor = max(1e-8, NOISE_MARGIN * fd_noise_floor(float(out.data), step))
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]

    rng = rng or np.random.default_rng(0)
    worst = 0.0
    skipped = 0
    for t, g_ad in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            fp, masks_p = _eval(f, tensors, skip_kinks)
            flat[i] = orig - step
            fm, masks_m = _eval(f, tensors, skip_kinks)
            flat[i] = orig
            if skip_kinks and not all(np.array_equal(a, b) for a, b in zip(masks_p, masks_m)):
                skipped += 1
                continue
            g_fd = (fp - fm) / (2.0 * step)
            worst = max(worst, float(relative_error(g_ad.reshape(-1)[i], g_fd, floor)))
    for t in tensors:
        t.grad = None
    return (worst, skipped) if return_skipped else worst


def _eval(f, tensors, probe):
    if not probe:
        return float(f(tensors).data), None
    ops.relu_probe = []
    try:
        value = float(f(tensors).data)
        return value, ops.relu_probe
    finally:
        ops.relu_probe = None
