"""Time the numba kernels against their numpy twins.

    python benchmarks/bench_kernels.py [--repeat N]

Also times one desk-preset training step under each backend.
"""

import argparse
import time

import numpy as np

from capsvos import _accel
from capsvos import tensor as T
from capsvos.metrics import boundary


def best_of(fn, repeat):
    fn()  # warm-up (numba compiles here)
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def cases(rng):
    x3 = rng.standard_normal((2, 10, 34, 58, 8))
    cols3 = _accel.im2col(x3, (3, 3, 3), (1, 1, 1), (8, 32, 56))
    x2 = rng.standard_normal((2, 1, 66, 114, 16))
    cols2 = _accel.im2col(x2, (1, 3, 3), (1, 2, 2), (1, 32, 56))
    disk = (np.arange(128)[:, None] - 64.0) ** 2 + (np.arange(224)[None, :] - 110.0) ** 2 <= 40.0 ** 2
    big_a = boundary(disk)
    big_b = boundary(np.roll(disk, 2, axis=1))
    k = rng.standard_normal((3, 3, 3, 8, 8))
    xin = rng.standard_normal((2, 8, 32, 56, 8))
    return {
        "col2im 3x3x3 (2,8,32,56,8)": lambda: _accel.col2im(cols3, x3.shape, (1, 1, 1)),
        "col2im 1x3x3 stride 2 (2,64,112,16)": lambda: _accel.col2im(cols2, x2.shape, (1, 2, 2)),
        "boundary match 128x224 disk, tol 1.5": lambda: _accel.matched_count(big_a, big_b, 1.5),
        "convolve forward+backward": lambda: _conv_fb(xin, k),
    }


def _conv_fb(x, k):
    kt = T.parameter(k)
    with T.Tape() as tape:
        y = T.tsum(T.square(T.convolve(x, kt, 1, 1)))
    tape.gradient(y, [kt])


def train_step():
    from capsvos.config import desk_preset
    from capsvos.gradcheck import model_batch
    from capsvos.harness import batch_loss
    from capsvos.model import CapsuleVOS

    model = CapsuleVOS(desk_preset(), seed=0)
    batch = model_batch(model)
    params = list(model.params.values())

    def run():
        with T.Tape() as tape:
            loss, _ = batch_loss(model, batch)
        tape.gradient(loss, params)

    return run


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not _accel.HAVE_NUMBA:
        print("numba unavailable (or CAPSVOS_DISABLE_NUMBA set); only the numpy path can run")
    rng = np.random.default_rng(0)
    jobs = dict(cases(rng))
    jobs["desk training step"] = train_step()
    backends = ["numpy"] + (["numba"] if _accel.HAVE_NUMBA else [])
    print(f"{'kernel':40s}" + "".join(f"{b:>12s}" for b in backends) + ("     speed-up" if len(backends) > 1 else ""))
    for name, fn in jobs.items():
        row = []
        for b in backends:
            _accel.set_backend(b)
            row.append(best_of(fn, args.repeat))
        line = f"{name:40s}" + "".join(f"{t * 1e3:10.2f}ms" for t in row)
        if len(row) > 1:
            line += f"   {row[0] / row[1]:8.1f}x"
        print(line)


if __name__ == "__main__":
    main()
