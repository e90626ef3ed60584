from pathlib import Path

import numpy as np
import pytest

from plumecast import _fallback, kernels

compiled = kernels.backends().get("compiled")
needs_ext = pytest.mark.skipif(compiled is None, reason="compiled extension not built")


def test_backend_selected():
    assert kernels.BACKEND in ("compiled", "python")


@needs_ext
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_im2col_col2im_agree(dtype):
    rng = np.random.default_rng(0)
    xp = rng.normal(size=(3, 7, 6, 5)).astype(dtype)
    a = _fallback.im2col(xp, 3, 3)
    b = compiled.im2col(xp, 3, 3)
    np.testing.assert_array_equal(a, b)
    cols = rng.normal(size=a.shape).astype(dtype)
    np.testing.assert_allclose(_fallback.col2im(cols, 3, 7, 6, 5, 3, 3),
                               compiled.col2im(cols, 3, 7, 6, 5, 3, 3), rtol=1e-5)


def test_col2im_is_adjoint_of_im2col():
    rng = np.random.default_rng(1)
    for impl in kernels.backends().values():
        xp = rng.normal(size=(2, 6, 5, 3))
        cols = rng.normal(size=(2 * 4 * 3, 27))
        lhs = np.sum(impl.im2col(xp, 3, 3) * cols)
        rhs = np.sum(xp * impl.col2im(cols, 2, 6, 5, 3, 3, 3))
        assert lhs == pytest.approx(rhs, rel=1e-12)


@needs_ext
@pytest.mark.parametrize("dtype,tol", [(np.float32, 2e-6), (np.float64, 1e-14)])
def test_lstm_kernels_agree(dtype, tol):
    rng = np.random.default_rng(2)
    z = (3 * rng.normal(size=(50, 24))).astype(dtype)
    cp = rng.normal(size=(50, 6)).astype(dtype)
    fa = _fallback.lstm_forward(z, cp)
    fb = compiled.lstm_forward(z, cp)
    for a, b in zip(fa, fb):
        np.testing.assert_allclose(a, b, rtol=tol, atol=tol)
    dh = rng.normal(size=(50, 6)).astype(dtype)
    dc = rng.normal(size=(50, 6)).astype(dtype)
    ba = _fallback.lstm_backward(fa[0], cp, fa[1], dh, dc)
    bb = compiled.lstm_backward(fa[0], cp, fa[1], dh, dc)
    for a, b in zip(ba, bb):
        np.testing.assert_allclose(a, b, rtol=10 * tol, atol=10 * tol)


@needs_ext
@pytest.mark.parametrize("cutoff", [np.inf, 900.0])
def test_gaussian_kernels_agree(cutoff):
    rng = np.random.default_rng(3)
    px, py = rng.uniform(-1000, 1000, 12), rng.uniform(-1000, 1000, 12)
    vals = rng.uniform(0, 50, (12, 3))
    xs = np.linspace(-800, 800, 9)
    ys = np.linspace(700, -700, 7)
    va, wa = _fallback.gaussian_accumulate(px, py, vals, xs, ys, 300.0, cutoff)
    vb, wb = compiled.gaussian_accumulate(px, py, vals, xs, ys, 300.0, cutoff)
    np.testing.assert_allclose(va, vb, rtol=1e-13)
    np.testing.assert_allclose(wa, wb, rtol=1e-13)


@needs_ext
def test_advect_diffuse_agree():
    rng = np.random.default_rng(4)
    c = rng.uniform(0, 5, (2, 9, 11))
    u = rng.normal(size=(9, 12))
    v = rng.normal(size=(10, 11))
    e = rng.uniform(0, 1, (2, 9, 11))
    a = _fallback.advect_diffuse_step(c, u, v, 30.0, 100.0, 5.0, e, np.array([1e-4, 0.0]))
    b = compiled.advect_diffuse_step(c, u, v, 30.0, 100.0, 5.0, e, np.array([1e-4, 0.0]))
    np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-13)


def _one_step_reference(c, u, v, diff, dx, dt, e, decay, open_boundary):
    """Cell-by-cell flux budget, written independently of both backends."""
    s_, h, w = c.shape
    out = np.empty_like(c)

    def val(s, i, j, i0, j0):
        if 0 <= i < h and 0 <= j < w:
            return c[s, i, j]
        return 0.0 if open_boundary else c[s, i0, j0]

    def flux(vel, upstream, downstream, c_lo, c_hi):
        adv = vel * (upstream if vel > 0 else downstream)
        return adv - diff * (c_hi - c_lo) / dx

    for s in range(s_):
        for i in range(h):
            for j in range(w):
                c0 = c[s, i, j]
                tot = 0.0
                # east, west, south, north faces; closed borders carry no flux
                for (ni, nj, vel, sign) in ((i, j + 1, u[i, j + 1], 1), (i, j - 1, u[i, j], -1),
                                            (i + 1, j, v[i + 1, j], 1), (i - 1, j, v[i, j], -1)):
                    inside = 0 <= ni < h and 0 <= nj < w
                    if not inside and not open_boundary:
                        continue
                    cn = val(s, ni, nj, i, j)
                    if sign > 0:
                        f = flux(vel, c0, cn, c0, cn)
                    else:
                        f = flux(vel, cn, c0, cn, c0)
                    tot += sign * f
                out[s, i, j] = c0 + dt * (e[s, i, j] - tot / dx - decay[s] * c0)
    return out


@pytest.mark.parametrize("open_boundary", [False, True])
def test_advect_matches_flux_budget_reference(open_boundary):
    rng = np.random.default_rng(5)
    c = rng.uniform(0, 5, (2, 6, 7))
    u = rng.normal(size=(6, 8))
    v = rng.normal(size=(7, 7))
    e = rng.uniform(0, 1, (2, 6, 7))
    dec = np.array([1e-4, 0.0])
    ref = _one_step_reference(c, u, v, 30.0, 100.0, 5.0, e, dec, open_boundary)
    for impl in [_fallback] + ([compiled] if compiled is not None else []):
        got = impl.advect_diffuse_step(c, u, v, 30.0, 100.0, 5.0, e, dec, 1, open_boundary)
        np.testing.assert_allclose(got, ref, rtol=1e-13, atol=1e-13)


@pytest.mark.parametrize("open_boundary", [False, True])
def test_advect_n_steps_equals_repeated_steps(open_boundary):
    rng = np.random.default_rng(6)
    c = rng.uniform(0, 5, (1, 8, 8))
    u = rng.normal(size=(8, 9))
    v = rng.normal(size=(9, 8))
    e = rng.uniform(0, 1, (1, 8, 8))
    dec = np.array([2e-4])
    for impl in [_fallback] + ([compiled] if compiled is not None else []):
        step = c
        for _ in range(7):
            step = impl.advect_diffuse_step(step, u, v, 20.0, 100.0, 4.0, e, dec, 1, open_boundary)
        multi = impl.advect_diffuse_step(c, u, v, 20.0, 100.0, 4.0, e, dec, 7, open_boundary)
        np.testing.assert_allclose(multi, step, rtol=1e-13, atol=1e-13)
        assert multi is not c


def test_open_boundary_loses_mass_closed_keeps_it():
    c = np.zeros((1, 9, 9))
    c[0, 4, 4] = 100.0
    u = np.full((9, 10), 2.0)
    v = np.zeros((10, 9))
    zero_e, zero_d = np.zeros_like(c), np.zeros(1)
    closed = kernels.advect_diffuse_step(c, u, v, 10.0, 50.0, 5.0, zero_e, zero_d, 400, False)
    opened = kernels.advect_diffuse_step(c, u, v, 10.0, 50.0, 5.0, zero_e, zero_d, 400, True)
    assert closed.sum() == pytest.approx(100.0, rel=1e-12)
    assert opened.sum() < 50.0
    assert np.all(opened >= 0) and np.all(closed >= 0)


def test_benchmark_script_runs(tmp_path, capsys):
    import runpy

    mod = runpy.run_path(str(Path(__file__).resolve().parents[1] / "benchmarks" / "bench_kernels.py"))
    assert mod["main"](["--repeat", "1", "--json", str(tmp_path / "b.json")]) == 0
    out = capsys.readouterr().out
    assert "advect_diffuse" in out
    assert (tmp_path / "b.json").exists()
