"""Time the numba and pure-numpy kernel paths side by side.

    python benchmarks/bench_kernels.py [--repeat 5]

Each kernel runs once per backend to warm up (numba compiles on first call),
then ``--repeat`` times; the best wall time is reported together with a check
that both backends returned identical arrays.
"""
import argparse
import math
import time

import numpy as np

from ablab import _jit
from ablab.dynamics import DriveSchedule, SettingSchedule, integrate_batch, random_history
from ablab.kernels import greedy_match


def best_time(fn, repeat):
    fn()
    best = math.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def euler_case(n_pulses=256, n=500, duration=12.0):
    rng = np.random.default_rng(1)
    hist = random_history(n, rng, 0.0, size=n_pulses)
    drive, settings = DriveSchedule.constant(1.0), SettingSchedule.constant(0.0, math.pi / 8)
    return lambda: integrate_batch(1.0, n, drive, settings.a, hist, duration)


def match_case(n_events=200_000):
    rng = np.random.default_rng(2)
    ta = np.sort(rng.integers(0, 20 * n_events, n_events))
    tb = np.sort(np.concatenate([ta[: n_events // 2] + rng.integers(-2, 3, n_events // 2),
                                 rng.integers(0, 20 * n_events, n_events // 2)]))
    return lambda: np.concatenate(greedy_match(ta, tb, 3))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if not _jit.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    cases = {"euler_delay (256 pulses x 6000 steps)": euler_case(),
             "greedy_match (2 x 200k events)": match_case()}
    previous = _jit.backend()
    print(f"{'kernel':40s} {'numba [s]':>10s} {'numpy [s]':>10s} {'speedup':>8s}  identical")
    try:
        for name, fn in cases.items():
            times, outs = {}, {}
            for b in ("numba", "numpy"):
                _jit.set_backend(b)
                times[b], outs[b] = best_time(fn, args.repeat)
            same = np.array_equal(outs["numba"], outs["numpy"], equal_nan=True)
            print(f"{name:40s} {times['numba']:10.4f} {times['numpy']:10.4f} "
                  f"{times['numpy'] / times['numba']:8.1f}  {same}")
    finally:
        _jit.set_backend(previous)


if __name__ == "__main__":
    main()
