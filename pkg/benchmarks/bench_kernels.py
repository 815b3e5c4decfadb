"""Time the compiled and numpy convolution kernels on the model's layer shapes.

    python3 benchmarks/bench_kernels.py [--repeat N]

Prints microseconds per call for forward, input-gradient and
weight-gradient passes, plus one full forward+backward step of the CSC
student, under each available backend.
"""
import argparse
import timeit

import numpy as np

from psfl import kernels
from psfl.autodiff import gradients, mse
from psfl.models import build_model, desk_profile

# (batch, in_ch, H, W, out_ch, k, stride, pad): the two encoder convs of the student
SHAPES = [(8, 1, 16, 16, 4, 3, 2, 1), (8, 4, 8, 8, 8, 3, 2, 1), (200, 4, 8, 8, 8, 3, 2, 1)]


def bench_layer(mod, shape, repeat):
    B, C, H, W, O, k, s, p = shape
    rng = np.random.default_rng(0)
    x = rng.standard_normal((B, C, H, W))
    w = rng.standard_normal((O, C, k, k))
    y = mod.conv2d_forward(x, w, s, p)
    gy = rng.standard_normal(y.shape)
    out = {}
    for name, fn in (("fwd", lambda: mod.conv2d_forward(x, w, s, p)),
                     ("bwd_in", lambda: mod.conv2d_backward_input(gy, w, s, p, H, W)),
                     ("bwd_w", lambda: mod.conv2d_backward_weight(x, gy, s, p, k, k))):
        out[name] = min(timeit.repeat(fn, number=20, repeat=repeat)) / 20 * 1e6
    return out


def bench_step(name, repeat):
    model = build_model(desk_profile("CSC"), seed=0)
    x = np.random.default_rng(1).random((8, 16, 16, 1))

    def step():
        out = model.forward(x)
        gradients(mse(out.m_hat, x), model.params.tensors)

    with kernels.use_backend(name):
        return min(timeit.repeat(step, number=10, repeat=repeat)) / 10 * 1e3


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    mods = kernels.backends()
    print(f"{'shape':<28}" + "".join(f"{b + ' ' + op:>18}" for b in mods for op in ("fwd", "bwd_in", "bwd_w")))
    for shape in SHAPES:
        cells = []
        for mod in mods.values():
            r = bench_layer(mod, shape, args.repeat)
            cells += [r["fwd"], r["bwd_in"], r["bwd_w"]]
        print(f"{str(shape):<28}" + "".join(f"{c:>16.1f}us" for c in cells))
    for name in mods:
        print(f"CSC train step, batch 8, {name}: {bench_step(name, args.repeat):.2f} ms")


if __name__ == "__main__":
    main()
