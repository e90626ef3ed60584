"""Pure numpy implementations of the hot kernels.

These are the reference versions; the compiled module ``plumecast._ext``
exposes the same functions with the same signatures and must agree with
them to floating point round-off.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(xp, kh, kw):
    """Unfold a padded NHWC batch into ``(N*H*W, kh*kw*C)`` patch rows."""
    n, hp, wp, c = xp.shape
    h, w = hp - kh + 1, wp - kw + 1
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # (n, h, w, c, kh, kw)
    win = win.transpose(0, 1, 2, 4, 5, 3)
    return np.ascontiguousarray(win).reshape(n * h * w, kh * kw * c)


def col2im(cols, n, hp, wp, c, kh, kw):
    """Adjoint of :func:`im2col`: scatter-add patch rows back onto the padded grid."""
    h, w = hp - kh + 1, wp - kw + 1
    cols6 = cols.reshape(n, h, w, kh, kw, c)
    out = np.zeros((n, hp, wp, c), dtype=cols.dtype)
    for a in range(kh):
        for b in range(kw):
            out[:, a:a + h, b:b + w, :] += cols6[:, :, :, a, b, :]
    return out


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def lstm_forward(z, c_prev):
    """Gate nonlinearities and state update for a batch of ConvLSTM cells.

    ``z`` holds the gate pre-activations laid out as ``[i | f | g | o]`` along
    the last axis. Returns ``(act, c, h)`` where ``act`` carries the activated
    gates in the same layout.
    """
    ch = c_prev.shape[-1]
    act = np.empty_like(z)
    act[:, :2 * ch] = _sigmoid(z[:, :2 * ch])
    act[:, 2 * ch:3 * ch] = np.tanh(z[:, 2 * ch:3 * ch])
    act[:, 3 * ch:] = _sigmoid(z[:, 3 * ch:])
    i, f, g, o = (act[:, k * ch:(k + 1) * ch] for k in range(4))
    c = f * c_prev + i * g
    h = o * np.tanh(c)
    return act, c, h


def lstm_backward(act, c_prev, c, dh, dc):
    ch = c_prev.shape[-1]
    i, f, g, o = (act[:, k * ch:(k + 1) * ch] for k in range(4))
    tc = np.tanh(c)
    dct = dc + dh * o * (1.0 - tc * tc)
    dz = np.empty_like(act)
    dz[:, :ch] = dct * g * i * (1.0 - i)
    dz[:, ch:2 * ch] = dct * c_prev * f * (1.0 - f)
    dz[:, 2 * ch:3 * ch] = dct * i * (1.0 - g * g)
    dz[:, 3 * ch:] = dh * tc * o * (1.0 - o)
    return dz, dct * f


def gaussian_accumulate(px, py, values, xs, ys, sigma, cutoff):
    """Kernel-weighted sums of point values at every grid cell.

    Args:
        px, py: point coordinates, shape ``(P,)``.
        values: point values, shape ``(P, K)``.
        xs: x coordinate of each grid column, shape ``(W,)``.
        ys: y coordinate of each grid row, shape ``(H,)``.
        sigma: kernel width, same unit as the coordinates.
        cutoff: points farther than this from a cell are skipped.

    Returns:
        ``(vsum, wsum)`` with shapes ``(H, W, K)`` and ``(H, W)``.
    """
    h, w, k = len(ys), len(xs), values.shape[1]
    vsum = np.zeros((h, w, k))
    wsum = np.zeros((h, w))
    inv = 1.0 / (2.0 * sigma * sigma)
    cut2 = cutoff * cutoff
    for p in range(len(px)):
        dx2 = (xs - px[p]) ** 2
        dy2 = (ys - py[p]) ** 2
        d2 = dy2[:, None] + dx2[None, :]
        wgt = np.exp(-d2 * inv)
        wgt[d2 > cut2] = 0.0
        wsum += wgt
        vsum += wgt[:, :, None] * values[p][None, None, :]
    return vsum, wsum


def advect_diffuse_step(conc, u_face, v_face, diff, dx, dt, emis, decay, n_steps=1,
                        open_boundary=False):
    """``n_steps`` explicit upwind advection / diffusion / source / decay updates.

    ``conc`` and ``emis`` are ``(S, H, W)``. ``u_face`` ``(H, W+1)`` holds the
    velocity through the faces between columns (positive towards higher
    column index), ``v_face`` ``(H+1, W)`` the velocity through the faces
    between rows (positive towards higher row index). With a closed boundary
    the border faces carry no flux regardless of their stored value; with
    ``open_boundary`` the exterior concentration is 0 and border faces use
    their stored velocities.
    """
    c = np.array(conc, dtype=float, copy=True)
    dec = np.asarray(decay, dtype=float)[:, None, None]
    h, w = c.shape[1:]
    if open_boundary:
        uf, vf = u_face[None], v_face[None]
    else:
        uf, vf = u_face[None, :, 1:-1], v_face[None, 1:-1, :]
    for _ in range(n_steps):
        if open_boundary:
            p = np.pad(c, ((0, 0), (1, 1), (1, 1)))
            cx, cy = p[:, 1:-1, :], p[:, :, 1:-1]
        else:
            cx, cy = c, c
        fx = np.zeros((c.shape[0], h, w + 1))
        fy = np.zeros((c.shape[0], h + 1, w))
        sx = slice(None) if open_boundary else slice(1, -1)
        fx[:, :, sx] = (np.where(uf > 0, uf * cx[:, :, :-1], uf * cx[:, :, 1:])
                        - diff * (cx[:, :, 1:] - cx[:, :, :-1]) / dx)
        fy[:, sx, :] = (np.where(vf > 0, vf * cy[:, :-1, :], vf * cy[:, 1:, :])
                        - diff * (cy[:, 1:, :] - cy[:, :-1, :]) / dx)
        div = (fx[:, :, 1:] - fx[:, :, :-1] + fy[:, 1:, :] - fy[:, :-1, :]) / dx
        c = c + dt * (emis - div - dec * c)
    return c
