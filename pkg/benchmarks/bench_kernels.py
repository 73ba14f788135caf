"""Times the range-coder kernels under each available backend.

    python3 benchmarks/bench_kernels.py --symbols 200000 --repeat 3

Both backends must produce identical bytes; the script checks that before
reporting throughput.
"""

import argparse
import time

import numpy as np

from hetpcc.coder import rangecoder
from hetpcc.coder.rangecoder import AdaptiveByteModel, StaticTables, rc_decode, rc_encode


def _best(fn, repeat):
    best = float("inf")
    out = None
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t)
    return best, out


def occupancy_like(n, rng):
    # skewed byte distribution, roughly what octree levels look like on surfaces
    common = np.array([1, 2, 4, 8, 16, 32, 64, 128, 3, 12, 48, 192, 15, 240, 51, 204])
    syms = rng.choice(common, size=n)
    rare = rng.random(n) < 0.1
    syms[rare] = rng.integers(1, 256, size=int(rare.sum()))
    return syms


def latent_like(n, rng, channels=16):
    tables = []
    for c in range(channels):
        width = 31 + 2 * (c % 4)
        p = np.exp(-0.5 * ((np.arange(width) - width // 2) / (1 + c % 3)) ** 2)
        f = np.maximum(1, np.round(p / p.sum() * 60000)).astype(np.int64)
        tables.append(np.concatenate([[0], np.cumsum(f)]))
    idx = np.arange(n) % channels
    syms = rng.integers(12, 19, size=n)
    return syms, StaticTables(tables, idx)


def bench(kernels, n, repeat, rng_seed):
    rng = np.random.default_rng(rng_seed)
    syms = occupancy_like(n, rng)
    lsyms, tables = latent_like(n, rng)
    rangecoder._kernels = kernels
    rows = {}
    t, data = _best(lambda: rc_encode(syms, AdaptiveByteModel()), repeat)
    rows["adaptive encode"] = (t, data)
    t, back = _best(lambda: rc_decode(data, AdaptiveByteModel(), n), repeat)
    assert np.array_equal(back, syms)
    rows["adaptive decode"] = (t, None)
    t, ldata = _best(lambda: rc_encode(lsyms, tables), repeat)
    rows["static encode"] = (t, ldata)
    t, back = _best(lambda: rc_decode(ldata, tables, n), repeat)
    assert np.array_equal(back, lsyms)
    rows["static decode"] = (t, None)
    return rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--symbols", type=int, default=200_000)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    saved = rangecoder._kernels
    results = {}
    try:
        for name, kernels in rangecoder.backends().items():
            results[name] = bench(kernels, args.symbols, args.repeat, args.seed)
    finally:
        rangecoder._kernels = saved

    names = list(results)
    streams = [(k, [results[b][k][1] for b in names]) for k in ("adaptive encode", "static encode")]
    for label, outs in streams:
        if any(o != outs[0] for o in outs):
            raise SystemExit(f"{label}: backends disagree")

    print(f"{args.symbols} symbols, best of {args.repeat}")
    print(f"{'kernel':<18}" + "".join(f"{n + ' Msym/s':>16}" for n in names) + ("   speedup" if len(names) > 1 else ""))
    for kernel in results[names[0]]:
        rates = [args.symbols / results[n][kernel][0] / 1e6 for n in names]
        line = f"{kernel:<18}" + "".join(f"{r:>16.3f}" for r in rates)
        if len(names) > 1:
            line += f"{rates[-1] / rates[0]:>9.1f}x"
        print(line)


if __name__ == "__main__":
    main()
