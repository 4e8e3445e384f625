"""Compiled kernels against the pure-Python fallback on batched 3x3 symmetric matrices.

    python3 benchmarks/bench_kernels.py [--n 4096] [--repeat 5] [--json out.json]
"""
from __future__ import annotations

import argparse
import json
import timeit

import numpy as np

from hybridcast import kernels


def inputs(n, seed=0):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(n, 3, 3))
    A = 0.5 * (a + np.swapaxes(a, 1, 2))
    return A, rng.normal(size=(n, 3, 3))


def bench(name, n, repeat):
    k = kernels.get_backend(name)
    A, G = inputs(n)
    w, V = k.sym3_eigh(A)
    fw = np.exp(w)
    cases = {
        "sym3_eigh": lambda: k.sym3_eigh(A),
        "sym3_funm": lambda: k.sym3_funm(V, fw),
        "sym3_funm_vjp": lambda: k.sym3_funm_vjp(w, V, fw, fw, G),
    }
    out = {}
    for op, fn in cases.items():
        t = timeit.Timer(fn)
        loops, _ = t.autorange()
        out[op] = min(t.repeat(repeat, loops)) / loops
    return out


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--n", type=int, default=4096, help="matrices per call")
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--json", help="write results here")
    args = p.parse_args(argv)
    backends = kernels.available_backends()
    res = {b: bench(b, args.n, args.repeat) for b in backends}
    print(f"{'op':16s}" + "".join(f"{b:>14s}" for b in backends) + ("     speedup" if len(backends) > 1 else ""))
    for op in res[backends[0]]:
        row = f"{op:16s}" + "".join(f"{res[b][op] * 1e3:11.3f} ms" for b in backends)
        if "cython" in res and "python" in res:
            row += f"{res['python'][op] / res['cython'][op]:11.1f}x"
        print(row)
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"n": args.n, "results": res}, fh, indent=2)


if __name__ == "__main__":
    main()
