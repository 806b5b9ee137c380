"""Time the numba kernels against their numpy fallbacks.

Usage: python3 benchmarks/bench_kernels.py [--repeat N] [--json OUT]

Kernel timings use both implementations in-process. The end-to-end training
step runs in two subprocesses because the backend is fixed at import time by
the CGM_DISABLE_NUMBA environment flag.
"""
import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from cgm import _kernels as K

STEP_SNIPPET = """
import time, numpy as np
from cgm import _kernels as K, tensor as T
from cgm.codecs import CATEGORICAL, NUMERICAL
from cgm.data import TableDataset, batches, fit_schemas
from cgm.model import ModelParams, TrainConfig, forward
rng = np.random.default_rng(0)
ds = fit_schemas(TableDataset(["x", "y", "c"], [NUMERICAL, NUMERICAL, CATEGORICAL],
                              [rng.normal(size=512), rng.normal(size=512),
                               rng.integers(0, 5, 512).astype(str)]))
params = ModelParams.init(ds.schemas, TrainConfig())
batch = next(batches(ds, 128, 0, 0, 0.2))
def step():
    _, loss = forward(params, batch)
    T.backward(loss)
step()
best = min(_timed(step) for _ in range({repeat}))
print(K.BACKEND, best)
"""

TIMED = """
def _timed(fn):
    t = time.perf_counter(); fn(); return time.perf_counter() - t
"""


def kernel_cases(rng):
    x = rng.normal(size=(1024, 400))
    mask = rng.random((1024, 400)) < 0.9
    mask[:, 0] = True
    y = K.NUMPY_KERNELS["softmax_masked"](x, mask)
    g = rng.normal(size=x.shape)
    h = rng.normal(size=(4096, 64))
    gain, bias = rng.normal(size=64), rng.normal(size=64)
    out, xhat, rstd = K.NUMPY_KERNELS["layer_norm_fwd"](h, gain, bias, 1e-5)
    probs = rng.random((4096, 200))
    pts = rng.normal(size=(10000, 2))
    means = rng.normal(size=(25, 2))
    return {
        "softmax_masked": (x, mask),
        "softmax_backward": (y, g),
        "layer_norm_fwd": (h, gain, bias, 1e-5),
        "layer_norm_bwd": (rng.normal(size=h.shape), xhat, rstd, gain),
        "gelu_fwd": (h,),
        "gelu_bwd": (h, rng.normal(size=h.shape)),
        "sample_rows": (probs, rng.random(4096)),
        "iso_gauss_logjoint": (pts, means, np.full(25, 0.0144), np.full(25, -np.log(25))),
    }


def time_call(fn, args, repeat):
    fn(*args)  # warm up / compile
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))


def step_time(disable_numba, repeat):
    env = dict(os.environ)
    env.pop("CGM_DISABLE_NUMBA", None)
    if disable_numba:
        env["CGM_DISABLE_NUMBA"] = "1"
    code = TIMED + STEP_SNIPPET.replace("{repeat}", str(repeat))
    code = "import time\n" + code
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True,
                         check=True).stdout.split()
    return out[0], float(out[1])


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--json")
    args = p.parse_args()
    if K.NUMBA_KERNELS is None:
        sys.exit("numba is unavailable or disabled; nothing to compare")
    rng = np.random.default_rng(0)
    rows = []
    print(f"{'kernel':<20} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for name, case in kernel_cases(rng).items():
        t_np = time_call(K.NUMPY_KERNELS[name], case, args.repeat)
        t_nb = time_call(K.NUMBA_KERNELS[name], case, args.repeat)
        rows.append({"kernel": name, "numpy_s": t_np, "numba_s": t_nb})
        print(f"{name:<20} {1e3 * t_np:>10.3f} {1e3 * t_nb:>10.3f} {t_np / t_nb:>8.2f}")
    _, s_np = step_time(True, args.repeat)
    _, s_nb = step_time(False, args.repeat)
    rows.append({"kernel": "train_step", "numpy_s": s_np, "numba_s": s_nb})
    print(f"{'train_step':<20} {1e3 * s_np:>10.3f} {1e3 * s_nb:>10.3f} {s_np / s_nb:>8.2f}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
