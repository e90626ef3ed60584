# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the kernels in ``plumecast._fallback``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp
from libc.string cimport memcpy

cnp.import_array()

ctypedef fused real:
    float
    double


def im2col(real[:, :, :, ::1] xp, int kh, int kw):
    cdef Py_ssize_t n = xp.shape[0], hp = xp.shape[1], wp = xp.shape[2], c = xp.shape[3]
    cdef Py_ssize_t h = hp - kh + 1, w = wp - kw + 1
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((n * h * w, kh * kw * c), dtype=dtype)
    cdef real[:, ::1] out = out_arr
    cdef Py_ssize_t b, i, j, a, bb, row, col
    cdef size_t nbytes = c * sizeof(real)
    with nogil:
        row = 0
        for b in range(n):
            for i in range(h):
                for j in range(w):
                    col = 0
                    for a in range(kh):
                        for bb in range(kw):
                            memcpy(&out[row, col], &xp[b, i + a, j + bb, 0], nbytes)
                            col += c
                    row += 1
    return out_arr


def col2im(real[:, ::1] cols, Py_ssize_t n, Py_ssize_t hp, Py_ssize_t wp,
           Py_ssize_t c, int kh, int kw):
    cdef Py_ssize_t h = hp - kh + 1, w = wp - kw + 1
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((n, hp, wp, c), dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, i, j, a, bb, ch, row, col
    with nogil:
        row = 0
        for b in range(n):
            for i in range(h):
                for j in range(w):
                    col = 0
                    for a in range(kh):
                        for bb in range(kw):
                            for ch in range(c):
                                out[b, i + a, j + bb, ch] += cols[row, col + ch]
                            col += c
                    row += 1
    return out_arr


def lstm_forward(real[:, ::1] z, real[:, ::1] c_prev):
    # Transcendentals go through numpy's vectorised tanh (far faster than
    # scalar libm calls); the gate algebra is fused into single passes.
    cdef Py_ssize_t m = z.shape[0], ch = c_prev.shape[1]
    dtype = np.float32 if real is float else np.float64
    scale = np.full(4 * ch, 0.5, dtype=dtype)
    scale[2 * ch:3 * ch] = 1.0
    act_arr = np.tanh(np.asarray(z) * scale)
    c_arr = np.empty((m, ch), dtype=dtype)
    cdef real[:, ::1] act = act_arr
    cdef real[:, ::1] c = c_arr
    cdef Py_ssize_t r, k
    with nogil:
        for r in range(m):
            for k in range(ch):
                act[r, k] = 0.5 * (1 + act[r, k])
                act[r, ch + k] = 0.5 * (1 + act[r, ch + k])
                act[r, 3 * ch + k] = 0.5 * (1 + act[r, 3 * ch + k])
                c[r, k] = act[r, ch + k] * c_prev[r, k] + act[r, k] * act[r, 2 * ch + k]
    h_arr = np.tanh(c_arr)
    cdef real[:, ::1] h = h_arr
    with nogil:
        for r in range(m):
            for k in range(ch):
                h[r, k] = act[r, 3 * ch + k] * h[r, k]
    return act_arr, c_arr, h_arr


def lstm_backward(real[:, ::1] act, real[:, ::1] c_prev, real[:, ::1] c,
                  real[:, ::1] dh, real[:, ::1] dc):
    cdef Py_ssize_t m = act.shape[0], ch = c_prev.shape[1]
    dtype = np.float32 if real is float else np.float64
    dz_arr = np.empty((m, 4 * ch), dtype=dtype)
    dcp_arr = np.empty((m, ch), dtype=dtype)
    cdef real[:, ::1] dz = dz_arr
    cdef real[:, ::1] dcp = dcp_arr
    tc_arr = np.tanh(np.asarray(c))
    cdef real[:, ::1] tcv = tc_arr
    cdef Py_ssize_t r, k
    cdef double i, f, g, o, tc, dct, dhv
    with nogil:
        for r in range(m):
            for k in range(ch):
                i = act[r, k]
                f = act[r, ch + k]
                g = act[r, 2 * ch + k]
                o = act[r, 3 * ch + k]
                tc = tcv[r, k]
                dhv = dh[r, k]
                dct = dc[r, k] + dhv * o * (1.0 - tc * tc)
                dz[r, k] = <real>(dct * g * i * (1.0 - i))
                dz[r, ch + k] = <real>(dct * c_prev[r, k] * f * (1.0 - f))
                dz[r, 2 * ch + k] = <real>(dct * i * (1.0 - g * g))
                dz[r, 3 * ch + k] = <real>(dhv * tc * o * (1.0 - o))
                dcp[r, k] = <real>(dct * f)
    return dz_arr, dcp_arr


def gaussian_accumulate(double[::1] px, double[::1] py, double[:, ::1] values,
                        double[::1] xs, double[::1] ys, double sigma, double cutoff):
    cdef Py_ssize_t npt = px.shape[0], kdim = values.shape[1]
    cdef Py_ssize_t h = ys.shape[0], w = xs.shape[0]
    vsum_arr = np.zeros((h, w, kdim))
    wsum_arr = np.zeros((h, w))
    cdef double[:, :, ::1] vsum = vsum_arr
    cdef double[:, ::1] wsum = wsum_arr
    cdef double inv = 1.0 / (2.0 * sigma * sigma)
    cdef double cut2 = cutoff * cutoff
    cdef double dy2, d2, wgt
    cdef Py_ssize_t p, i, j, k
    with nogil:
        for p in range(npt):
            for i in range(h):
                dy2 = (ys[i] - py[p]) * (ys[i] - py[p])
                if dy2 > cut2:
                    continue
                for j in range(w):
                    d2 = dy2 + (xs[j] - px[p]) * (xs[j] - px[p])
                    if d2 > cut2:
                        continue
                    wgt = exp(-d2 * inv)
                    wsum[i, j] += wgt
                    for k in range(kdim):
                        vsum[i, j, k] += wgt * values[p, k]
    return vsum_arr, wsum_arr


def advect_diffuse_step(double[:, :, ::1] conc, double[:, ::1] u_face,
                        double[:, ::1] v_face, double diff, double dx, double dt,
                        double[:, :, ::1] emis, double[::1] decay, int n_steps=1,
                        bint open_boundary=False):
    cdef Py_ssize_t ns = conc.shape[0], h = conc.shape[1], w = conc.shape[2]
    a_arr = np.array(conc, copy=True)
    b_arr = np.empty((ns, h, w))
    cdef double[:, :, ::1] a = a_arr
    cdef double[:, :, ::1] b = b_arr
    cdef double[:, :, ::1] tmp
    cdef Py_ssize_t s, i, j
    cdef int step
    cdef double c0, cn, fe, fw, fn, fs, u, inv_dx = 1.0 / dx, kd = diff / dx
    with nogil:
        for step in range(n_steps):
            for s in range(ns):
                for i in range(h):
                    for j in range(w):
                        c0 = a[s, i, j]
                        # neighbours outside the grid read as 0 (open) or reflect (closed)
                        if j + 1 < w or open_boundary:
                            cn = a[s, i, j + 1] if j + 1 < w else 0.0
                            u = u_face[i, j + 1]
                            fe = (u * c0 if u > 0 else u * cn) - kd * (cn - c0)
                        else:
                            fe = 0.0
                        if j > 0 or open_boundary:
                            cn = a[s, i, j - 1] if j > 0 else 0.0
                            u = u_face[i, j]
                            fw = (u * cn if u > 0 else u * c0) - kd * (c0 - cn)
                        else:
                            fw = 0.0
                        if i + 1 < h or open_boundary:
                            cn = a[s, i + 1, j] if i + 1 < h else 0.0
                            u = v_face[i + 1, j]
                            fs = (u * c0 if u > 0 else u * cn) - kd * (cn - c0)
                        else:
                            fs = 0.0
                        if i > 0 or open_boundary:
                            cn = a[s, i - 1, j] if i > 0 else 0.0
                            u = v_face[i, j]
                            fn = (u * cn if u > 0 else u * c0) - kd * (c0 - cn)
                        else:
                            fn = 0.0
                        b[s, i, j] = c0 + dt * (emis[s, i, j] - (fe - fw + fs - fn) * inv_dx
                                                - decay[s] * c0)
            tmp = a
            a = b
            b = tmp
    return a_arr if n_steps % 2 == 0 else b_arr
