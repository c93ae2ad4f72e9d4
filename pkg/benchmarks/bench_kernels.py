"""Time the numba and numpy paths of each hot kernel on corpus-sized inputs.

    python3 benchmarks/bench_kernels.py [--repeat 20]

The compiled path is warmed up once before timing, so its one-off load or
compile cost is reported separately.
"""

import argparse
import time

import numpy as np

from cogesture import _kernels
from cogesture.motion.rotation import random_rotations, matrix_to_rot6d_batch
from cogesture.motion.skeleton import TOY_SKELETON


def cases(rng):
    k = 160 * 8  # frames of a long clip times joints
    rot = random_rotations(k, rng)
    return {
        "rot6d_to_matrix": (matrix_to_rot6d_batch(rot),),
        "euler_xyz_to_matrix": (rng.uniform(-np.pi, np.pi, (k, 3)),),
        "nearest_code": (rng.standard_normal((2000, 32)), rng.standard_normal((512, 32))),
        "frame_energy": (rng.standard_normal(160 * 256), 256, 160),
        "forward_kinematics": (random_rotations(160 * 8, rng).reshape(160, 8, 3, 3),
                               np.array(TOY_SKELETON.parents, dtype=np.int64),
                               np.array(TOY_SKELETON.offsets, dtype=np.float64), rng.standard_normal((160, 3))),
    }


def best_of(fn, args, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    if not _kernels.HAS_NUMBA:
        print("numba unavailable or disabled; timing the numpy path only")
    print(f"{'kernel':22s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s} {'first call ms':>14s}")
    for name, inputs in cases(rng).items():
        t_np = best_of(_kernels.NUMPY_IMPLS[name], inputs, args.repeat) * 1e3
        if _kernels.HAS_NUMBA:
            t0 = time.perf_counter()
            _kernels.NUMBA_IMPLS[name](*inputs)
            first = (time.perf_counter() - t0) * 1e3
            t_nb = best_of(_kernels.NUMBA_IMPLS[name], inputs, args.repeat) * 1e3
            print(f"{name:22s} {t_np:10.3f} {t_nb:10.3f} {t_np / t_nb:8.2f} {first:14.1f}")
        else:
            print(f"{name:22s} {t_np:10.3f} {'-':>10s} {'-':>8s} {'-':>14s}")


if __name__ == "__main__":
    main()
