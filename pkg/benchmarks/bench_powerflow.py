"""Compare the compiled and pure-Python Newton kernels.

    python benchmarks/bench_powerflow.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from vvlab import powerflow as pf
from vvlab.netmodel import build_admittance, load_network


def cases():
    for name in ("bus5", "bus13"):
        net = load_network(name)
        Y = build_admittance(net, np.ones(len(net.capacitors), dtype=int))
        yield name, Y, net.kw_to_pu(-net.load_p), net.kw_to_pu(-net.load_q)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=2000)
    args = ap.parse_args()
    backends = ["python"] + (["compiled"] if pf.has_compiled() else [])
    if len(backends) == 1:
        print("compiled kernel not built; timing the Python kernel only")
    print(f"{'case':<8}{'backend':<10}{'us/solve':>10}{'iters':>7}")
    for name, Y, p, q in cases():
        timing = {}
        for b in backends:
            pf.set_backend(b)
            sol = pf.solve(Y, p, q, 1.0)
            best = min(timeit.repeat(lambda: pf.solve(Y, p, q, 1.0), number=args.repeat, repeat=3))
            timing[b] = 1e6 * best / args.repeat
            print(f"{name:<8}{b:<10}{timing[b]:>10.1f}{sol.iterations:>7}")
        if "compiled" in timing:
            print(f"{name:<8}speedup   {timing['python'] / timing['compiled']:>10.1f}x")
    pf.set_backend("compiled" if pf.has_compiled() else "python")


if __name__ == "__main__":
    main()
