"""Time the compiled kernels against the numpy fallback on model-sized inputs.

Usage::

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Each kernel is first checked for agreement between the backends, then timed
with ``timeit`` (best of ``--repeat``).
"""
import argparse
import json
import logging
import sys
import timeit

import numpy as np

from plumecast import kernels

logger = logging.getLogger("bench_kernels")


def cases(rng):
    """(name, args builder) pairs sized like one training patch of the default model."""
    xp = rng.normal(size=(24, 66, 66, 16)).astype(np.float32)      # padded 64x64, 16 channels
    cols = rng.normal(size=(24 * 64 * 64, 3 * 3 * 16)).astype(np.float32)
    z = rng.normal(size=(64 * 64, 4 * 16)).astype(np.float32)
    c_prev = rng.normal(size=(64 * 64, 16)).astype(np.float32)
    fwd = kernels.backends()["python"].lstm_forward(z, c_prev)
    px, py = rng.uniform(-2000, 2000, 50), rng.uniform(-2000, 2000, 50)
    vals = rng.uniform(0, 80, (50, 24 * 4))
    xs = (np.arange(64) - 31.5) * 50.0
    conc = rng.uniform(0, 50, (3, 400, 400))          # species, rows, columns
    u = rng.uniform(-3, 3, (400, 401))
    v = rng.uniform(-3, 3, (401, 400))
    emis = rng.uniform(0, 1e-3, (3, 400, 400))
    decay = np.full(3, 1e-5)
    return [
        ("im2col 24x64x64x16 k3", lambda m: m.im2col(xp, 3, 3)),
        ("col2im 24x64x64x16 k3", lambda m: m.col2im(cols, 24, 66, 66, 16, 3, 3)),
        ("lstm_forward 64x64x16", lambda m: m.lstm_forward(z, c_prev)),
        ("lstm_backward 64x64x16", lambda m: m.lstm_backward(fwd[0], c_prev, fwd[1], c_prev, c_prev)),
        ("gaussian_accumulate 50 pts 64x64", lambda m: m.gaussian_accumulate(px, py, vals, xs, xs[::-1].copy(),
                                                                          5000.0, 30000.0)),
        ("advect_diffuse 3x400x400 x10", lambda m: m.advect_diffuse_step(conc, u, v, 200.0, 1000.0, 60.0,
                                                                       emis, decay, 10, True)),
    ]


def _flat(out):
    if isinstance(out, tuple):
        return [np.asarray(o) for o in out]
    return [np.asarray(out)]


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    p.add_argument("--repeat", type=int, default=5, help="timing repetitions; the best is reported")
    p.add_argument("--json", help="also write results to this file")
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    backs = kernels.backends()
    if "compiled" not in backs:
        logger.warning("compiled extension not available; timing the fallback only")
    rng = np.random.default_rng(args.seed)
    rows = []
    for name, call in cases(rng):
        outs = {b: _flat(call(m)) for b, m in backs.items()}
        if "compiled" in outs:
            for a, b in zip(outs["python"], outs["compiled"]):
                np.testing.assert_allclose(a, b, rtol=1e-5, atol=1e-6, err_msg=name)
        row = {"kernel": name}
        for b, m in backs.items():
            row[b] = min(timeit.repeat(lambda: call(m), number=1, repeat=args.repeat))
        rows.append(row)

    print(f"{'kernel':<36} {'python (ms)':>12} {'compiled (ms)':>14} {'speed-up':>9}")
    for r in rows:
        comp = r.get("compiled")
        speed = f"{r['python'] / comp:8.1f}x" if comp else "       -"
        comp_s = f"{1e3 * comp:14.2f}" if comp else f"{'-':>14}"
        print(f"{r['kernel']:<36} {1e3 * r['python']:12.2f} {comp_s} {speed}")
    if args.json:
        with open(args.json, "w") as f:
            json.dump({"backend_default": kernels.BACKEND, "results": rows}, f, indent=1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
