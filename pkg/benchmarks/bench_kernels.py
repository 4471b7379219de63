"""Compiled vs numpy kernels: per-call time and agreement.

    python benchmarks/bench_kernels.py [--repeat 200] [--json out.json]

Also times one full perceptual value-and-gradient evaluation and one
synthesis forward/backward pass with each backend.
"""
import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from cri import _kernels_py

try:
    from cri import _ckernels
except ImportError:  # extension not built
    _ckernels = None


def make_inputs(seed=0, layers=6, res=32, cin=16, cout=16):
    rng = np.random.default_rng(seed)
    geom = np.column_stack([
        rng.uniform(0.2, 0.8, (layers, 2)), rng.uniform(0.05, 0.3, layers),
        rng.uniform(0, 1, (layers, 3)), rng.normal(0, 3, layers),
    ])
    return {
        "geom": geom,
        "bias": rng.normal(size=3),
        "dpre": rng.normal(size=(res, res, 3)),
        "x": rng.normal(size=(res, res, cin)),
        "w": rng.normal(size=(3, 3, cin, cout)) / 12,
        "b": rng.normal(size=cout),
        "dy": rng.normal(size=(res, res, cout)),
    }


def kernel_calls(mod, a, res=32):
    return {
        "splat_forward": lambda: mod.splat_forward(a["geom"], a["bias"], res, res),
        "splat_backward": lambda: mod.splat_backward(a["geom"], a["dpre"]),
        "conv3x3_forward": lambda: mod.conv3x3_forward(a["x"], a["w"], a["b"]),
        "conv3x3_backward_input": lambda: mod.conv3x3_backward_input(a["dy"], a["w"]),
    }


def max_abs_diff(x, y):
    if isinstance(x, tuple):
        return max(max_abs_diff(u, v) for u, v in zip(x, y))
    return float(np.max(np.abs(np.asarray(x) - np.asarray(y))))


def best_time(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


PIPELINE_SNIPPET = r"""
import json, timeit, numpy as np
from cri import kernels
from cri.generator import ToyGenerator
from cri.perception import FeatureExtractor, PerceptualTarget
g = ToyGenerator(); fx = FeatureExtractor()
w = g.mapping(g.sample_z(1, 0), 0)[0]
target = PerceptualTarget(fx, g.synthesize(g.mapping(g.sample_z(1, 1), 0)[0]))
def step():
    img, cache = g.synthesize(w, return_cache=True)
    _, dimg = target.value_and_grad(img)
    g.synthesis_backward(cache, dimg)
t = min(timeit.repeat(step, number=1, repeat=REPEAT))
print(json.dumps({"backend": kernels.BACKEND, "step": t}))
"""


def pipeline_time(pure, repeat):
    env = dict(os.environ, CRI_PURE_PYTHON="1" if pure else "0")
    out = subprocess.run([sys.executable, "-c", PIPELINE_SNIPPET.replace("REPEAT", str(repeat))],
                         env=env, capture_output=True, text=True, check=True)
    return json.loads(out.stdout)


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--json")
    args = ap.parse_args(argv)
    if _ckernels is None:
        print("compiled extension not available; build with `pip install -e . --no-build-isolation`")
        return 1
    a = make_inputs()
    py, cy = kernel_calls(_kernels_py, a), kernel_calls(_ckernels, a)
    rows = []
    print(f"{'kernel':<24}{'numpy [us]':>12}{'cython [us]':>13}{'speedup':>9}{'max|diff|':>11}")
    for name in py:
        tp, tc = best_time(py[name], args.repeat), best_time(cy[name], args.repeat)
        diff = max_abs_diff(py[name](), cy[name]())
        rows.append({"kernel": name, "python_s": tp, "cython_s": tc, "speedup": tp / tc, "max_abs_diff": diff})
        print(f"{name:<24}{tp * 1e6:>12.1f}{tc * 1e6:>13.1f}{tp / tc:>9.2f}{diff:>11.1e}")
    pipe = [pipeline_time(True, max(args.repeat // 4, 5)), pipeline_time(False, max(args.repeat // 4, 5))]
    print("\nsynthesis + perceptual loss + backward, one step:")
    for p in pipe:
        print(f"  {p['backend']:<8}{p['step'] * 1e3:8.2f} ms")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"kernels": rows, "pipeline": pipe}, fh, indent=1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
