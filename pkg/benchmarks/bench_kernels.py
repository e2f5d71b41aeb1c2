"""Compare the compiled and pure-Python convolution kernels.

    python3 benchmarks/bench_kernels.py [--repeats N]

Times im2col, col2im and a full conv forward+backward on shapes taken from
the toy model, once per available backend, and checks that both backends
produce identical bytes.
"""

import argparse
import time

import numpy as np

from deproj.tensor import Tape, Tensor, backward, kernels, ops

# (label, input shape [B, C, *S], kernel shape [Co, C, *K], stride)
CASES = [
    ("2d enc 32x32", (16, 8, 32, 32), (16, 8, 3, 3), 2),
    ("2d dec 16x16", (16, 32, 16, 16), (16, 32, 3, 3), 1),
    ("3d refine 8x32x32", (16, 3, 8, 32, 32), (2, 3, 3, 3, 3), 1),
    ("3d post 8x32x32", (16, 1, 8, 32, 32), (8, 1, 3, 3, 3), 2),
]


def _best(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def _case(shape, wshape, stride, repeats):
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal(shape).astype(np.float32), requires_grad=True)
    w = Tensor(rng.standard_normal(wshape).astype(np.float32), requires_grad=True)
    b = Tensor(np.zeros(wshape[0], dtype=np.float32), requires_grad=True)

    nd = len(shape) - 2
    xpad = np.pad(x.data, [(0, 0), (0, 0)] + [(1, 1)] * nd).reshape(shape[:2] + (1,) * (3 - nd) + tuple(s + 2 for s in shape[2:]))
    k3 = (1,) * (3 - nd) + wshape[2:]
    s3 = (1,) * (3 - nd) + (stride,) * nd
    o3 = (1,) * (3 - nd) + ops.conv_output_shape(shape[2:], wshape[2:], (stride,) * nd, (1,) * nd)
    cols = kernels.im2col(xpad, k3, s3, o3)

    def fwd_bwd():
        with Tape() as tape:
            loss = ops.sum(ops.conv(x, w, b, stride=stride, padding=1))
        return backward(tape, loss)

    times = {
        "im2col": _best(lambda: kernels.im2col(xpad, k3, s3, o3), repeats),
        "col2im": _best(lambda: kernels.col2im(cols, xpad.shape, k3, s3, o3), repeats),
        "conv f+b": _best(fwd_bwd, repeats),
    }
    grads = fwd_bwd()
    return times, cols.tobytes() + grads[x].tobytes()


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()
    backends = kernels.available_backends()
    print(f"backends: {', '.join(backends)}")
    if "compiled" not in backends:
        print("compiled extension not built; only the Python fallback is timed")
    previous = kernels.active_backend()
    header = f"{'case':22s} {'op':9s}" + "".join(f"{b:>12s}" for b in backends)
    if len(backends) == 2:
        header += f"{'speedup':>10s}"
    print(header)
    try:
        for label, shape, wshape, stride in CASES:
            results, digests = {}, {}
            for name in backends:
                kernels.use_backend(name)
                results[name], digests[name] = _case(shape, wshape, stride, args.repeats)
            for op in ("im2col", "col2im", "conv f+b"):
                row = f"{label:22s} {op:9s}" + "".join(f"{results[b][op] * 1e3:10.2f}ms" for b in backends)
                if len(backends) == 2:
                    row += f"{results['python'][op] / results['compiled'][op]:9.2f}x"
                print(row)
            if len(set(digests.values())) > 1:
                print(f"{label}: backends DISAGREE")
    finally:
        kernels.use_backend(previous)


if __name__ == "__main__":
    main()
