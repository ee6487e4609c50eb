"""Compare the numba kernels with the pure-numpy fallback.

Each backend runs in its own interpreter because the switch is read at import
time.  Usage: python benchmarks/bench_backends.py [--repeat N]
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np


def _best(fn, repeat):
    fn()  # warm-up, includes JIT compilation
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def measure(repeat):
    from s4c._accel import backend
    from s4c.nn import kernels
    from s4c.nn.network import NetworkConfig, build_network
    from s4c.nn.layers import softmax_cross_entropy
    from s4c.postprocess import connected_components
    from s4c.volume import LabelVolume

    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 8, 32, 32, 32)).astype(np.float32)
    w = rng.standard_normal((8, 8, 3, 3, 3)).astype(np.float32)
    g = rng.standard_normal(x.shape).astype(np.float32)
    xd = rng.standard_normal((2, 8, 16, 16, 16)).astype(np.float32)
    wd = rng.standard_normal((8, 8, 4, 4, 4)).astype(np.float32)
    gd = rng.standard_normal((2, 8, 32, 32, 32)).astype(np.float32)
    mask = LabelVolume((rng.random((96, 96, 96)) < 0.3).astype(np.uint8))
    net = build_network(NetworkConfig.for_scale(32), seed=0)
    patch = rng.random((2, 1, 32, 32, 32)).astype(np.float32)
    target = rng.integers(0, 3, (2, 32, 32, 32))

    def step():
        main, aux = net.forward(patch)
        _, gm = softmax_cross_entropy(main, target)
        net.backward(gm, [softmax_cross_entropy(a, target)[1] for a in aux])

    cases = {
        "conv3x3 forward": lambda: kernels.conv3x3(x, w),
        "conv3x3 backward": lambda: kernels.conv3x3_backward(x, w, g),
        "deconv4x4 forward": lambda: kernels.deconv4x4(xd, wd),
        "deconv4x4 backward": lambda: kernels.deconv4x4_backward(xd, wd, gd),
        "maxpool forward": lambda: kernels.maxpool2(x),
        "components 96^3": lambda: connected_components(mask),
        "32^3 net fwd+bwd": step,
    }
    return {"backend": backend(), "seconds": {k: _best(f, repeat) for k, f in cases.items()}}


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=3, help="timed repetitions per case, best kept (default: 3)")
    p.add_argument("--worker", action="store_true", help=argparse.SUPPRESS)
    args = p.parse_args()
    if args.worker:
        print(json.dumps(measure(args.repeat)))
        return
    runs = []
    for flag in ("1", "0"):
        env = dict(os.environ, S4C_NUMBA=flag)
        out = subprocess.run([sys.executable, __file__, "--worker", "--repeat", str(args.repeat)],
                             env=env, capture_output=True, text=True, check=True)
        runs.append(json.loads(out.stdout.strip().splitlines()[-1]))
    a, b = runs
    print(f"{'case':<22}{a['backend']:>10}{b['backend']:>10}{'ratio':>8}")
    for k in a["seconds"]:
        ta, tb = a["seconds"][k], b["seconds"][k]
        print(f"{k:<22}{ta:>9.4f}s{tb:>9.4f}s{tb / ta:>7.1f}x")


if __name__ == "__main__":
    main()
