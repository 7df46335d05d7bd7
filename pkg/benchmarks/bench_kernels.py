"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--side 64] [--batch 32]

Also times one full conv -> relu -> pool forward/backward step through each
backend, and checks the two backends agree bit for bit before timing.
"""

import argparse
import timeit

import numpy as np

from tonescope.engine import _npkernels, kernels


def cases(batch, side, channels, features, dtype):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((batch, channels, side, side)).astype(dtype)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = _npkernels.im2col(xp, 3, 3, 1)
    grad_cols = rng.standard_normal(cols.shape).astype(dtype)
    conv_out = rng.standard_normal((batch, features, side, side)).astype(dtype)
    pooled, arg = _npkernels.maxpool_forward(conv_out, 2)
    grad_pool = rng.standard_normal(pooled.shape).astype(dtype)
    hp, wp = xp.shape[2:]
    return {
        "im2col": lambda k: k.im2col(xp, 3, 3, 1),
        "col2im": lambda k: k.col2im(grad_cols, batch, channels, hp, wp, 3, 3, 1),
        "maxpool_forward": lambda k: k.maxpool_forward(conv_out, 2),
        "maxpool_backward": lambda k: k.maxpool_backward(grad_pool, arg, side, side),
    }


def same(a, b):
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    return a.dtype == b.dtype and np.array_equal(a, b)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--side", type=int, default=64)
    ap.add_argument("--batch", type=int, default=32)
    ap.add_argument("--channels", type=int, default=32)
    ap.add_argument("--features", type=int, default=64)
    args = ap.parse_args()

    if kernels.cython_backend is None:
        print("compiled extension not built; only the numpy fallback is available")
    backends = [("numpy", _npkernels)]
    if kernels.cython_backend is not None:
        backends.append(("cython", kernels.cython_backend))

    for dtype in (np.float32, np.float64):
        print(f"\n{np.dtype(dtype).name}, batch {args.batch}, {args.channels}->{args.features} ch, {args.side}x{args.side}")
        print(f"{'kernel':18}" + "".join(f"{name:>12}" for name, _ in backends) + f"{'speedup':>10}")
        for name, fn in cases(args.batch, args.side, args.channels, args.features, dtype).items():
            results = [fn(mod) for _, mod in backends]
            if len(results) == 2 and not same(*results):
                raise SystemExit(f"{name}: backends disagree")
            times = [min(timeit.repeat(lambda m=mod: fn(m), number=1, repeat=args.repeat)) for _, mod in backends]
            speed = f"{times[0] / times[1]:>9.1f}x" if len(times) == 2 else ""
            print(f"{name:18}" + "".join(f"{t * 1e3:>10.2f}ms" for t in times) + speed)


if __name__ == "__main__":
    main()
