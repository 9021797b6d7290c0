"""Compare the compiled and pure-numpy kernel paths.

Runs the im2col / col2im / max-pool kernels on a few realistic shapes
under both implementations and prints per-call times plus the speedup.
Selection of the path is done the same way the package does it: via the
EVA_NO_NUMBA environment variable, so each path runs in a subprocess.

Usage: python benchmarks/bench_kernels.py [--repeats N]
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import timeit

CASES = [
    # (channels, height, width, kernel, stride, label)
    (3, 32, 32, 3, 1, "cifar-entry"),
    (64, 16, 16, 3, 1, "mid-layer"),
    (128, 8, 8, 3, 1, "deep-layer"),
]

_WORKER = r"""
import json, sys, timeit
import numpy as np
from evacert import kernels

repeats = int(sys.argv[1])
cases = json.loads(sys.argv[2])
rng = np.random.default_rng(0)
out = {"using_numba": kernels.USING_NUMBA, "results": []}
for c, h, w, k, stride, label in cases:
    x = rng.random((c, h, w))
    oh = kernels.conv_out_size(h, k, stride, 0)
    ow = kernels.conv_out_size(w, k, stride, 0)
    grad = rng.random((c * k * k, oh * ow))

    timings = {}
    for name, fn in [
        ("im2col", lambda: kernels.im2col(x, k, k, stride, stride, 0, 0, oh, ow)),
        ("col2im", lambda: kernels.col2im_add(grad, c, h, w, k, k, stride, stride, 0, 0, oh, ow)),
        ("maxpool", lambda: kernels.maxpool_forward(x, 2, 2, 2, 2)),
    ]:
        fn()  # warm-up (triggers compilation on the compiled path)
        timings[name] = min(timeit.repeat(fn, number=repeats, repeat=3)) / repeats
    out["results"].append({"case": label, "timings": timings})
print(json.dumps(out))
"""


def run_path(no_numba: bool, repeats: int) -> dict:
    env = dict(os.environ)
    if no_numba:
        env["EVA_NO_NUMBA"] = "1"
    else:
        env.pop("EVA_NO_NUMBA", None)
    proc = subprocess.run(
        [sys.executable, "-c", _WORKER, str(repeats), json.dumps(CASES)],
        env=env,
        capture_output=True,
        text=True,
        check=True,
    )
    return json.loads(proc.stdout.strip().splitlines()[-1])


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=50)
    args = parser.parse_args()

    numpy_path = run_path(True, args.repeats)
    numba_path = run_path(False, args.repeats)
    if not numba_path["using_numba"]:
        print("note: numba unavailable; both runs used the numpy path")

    print(f"{'case':<12} {'kernel':<8} {'numpy (us)':>12} {'numba (us)':>12} {'speedup':>8}")
    for np_res, nb_res in zip(numpy_path["results"], numba_path["results"]):
        for kernel in np_res["timings"]:
            t_np = np_res["timings"][kernel] * 1e6
            t_nb = nb_res["timings"][kernel] * 1e6
            print(
                f"{np_res['case']:<12} {kernel:<8} {t_np:>12.2f} {t_nb:>12.2f} "
                f"{t_np / t_nb:>7.2f}x"
            )


if __name__ == "__main__":
    main()
