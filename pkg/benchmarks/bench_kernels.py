"""Compare the numba and pure-numpy kernel backends.

Each backend runs in its own interpreter because the choice is made once,
at import time, from ``COMMONTRENDS_BACKEND``. Usage::

    python benchmarks/bench_kernels.py [--length 564] [--repeat 20]
"""
import argparse
import json
import os
import subprocess
import sys

WORKER = r"""
import json, sys, time
import numpy as np
from commontrends import BACKEND, ssm, structural, synthetic

length, repeat = int(sys.argv[1]), int(sys.argv[2])
spec = structural.StructuralSpec()
params = structural.StructuralParams(1e-3, 1e-4, 1e-2, 0.1, 0.9, 0.15)
obs, _ = synthetic.structural_series(length, params, spec, seed=0, level=15.0)
model = structural.assemble(spec, params)

def best(fn, n):
    fn()
    times = []
    for _ in range(n):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)

f = ssm.filter(model, obs)
out = {
    "backend": BACKEND,
    "loglik_s": best(lambda: ssm.loglik(model, obs), repeat),
    "filter_s": best(lambda: ssm.filter(model, obs), repeat),
    "smooth_s": best(lambda: ssm.smooth(model, f), max(1, repeat // 4)),
    "loglik": ssm.loglik(model, obs),
}
print(json.dumps(out))
"""


def run(backend, length, repeat):
    env = dict(os.environ, COMMONTRENDS_BACKEND=backend)
    proc = subprocess.run([sys.executable, "-c", WORKER, str(length), str(repeat)],
                          env=env, capture_output=True, text=True, check=True)
    return json.loads(proc.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--length", type=int, default=564)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    rows = [run(b, args.length, args.repeat) for b in ("numba", "numpy")]
    print(f"structural model, 14 states, {args.length} steps (best of {args.repeat})")
    print(f"{'backend':<8} {'loglik ms':>10} {'filter ms':>10} {'smooth ms':>10}")
    for r in rows:
        print(f"{r['backend']:<8} {1e3 * r['loglik_s']:>10.3f} {1e3 * r['filter_s']:>10.3f} "
              f"{1e3 * r['smooth_s']:>10.3f}")
    nb, npy = rows
    print(f"speed-up  {npy['loglik_s'] / nb['loglik_s']:>10.1f} {npy['filter_s'] / nb['filter_s']:>10.1f} "
          f"{npy['smooth_s'] / nb['smooth_s']:>10.1f}")
    print(f"loglik agreement: |diff| = {abs(nb['loglik'] - npy['loglik']):.3e}")


if __name__ == "__main__":
    main()
