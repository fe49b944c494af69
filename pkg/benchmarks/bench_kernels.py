"""Framing and overlap-add: compiled loops against the numpy path.

    python3 benchmarks/bench_kernels.py [--seconds 10] [--repeat 20]

Also times a full STFT/ISTFT round trip under whichever backend
``ENVIRO_INFILL_NUMBA`` selects.
"""
import argparse
import timeit

import numpy as np

from enviro_infill import _accel, dsp, kernels


def best_ms(fn, repeat):
    fn()
    return 1000.0 * min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seconds", type=float, default=10.0)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)

    cfg = dsp.StftConfig()
    x = np.random.default_rng(0).standard_normal(int(args.seconds * cfg.sample_rate))
    w, hop = cfg.window_array, cfg.hop_size
    n = (x.size - cfg.window_size) // hop + 1
    frames = kernels._frame_numpy(x, w, hop, n)

    print(f"signal {args.seconds:g} s, {n} frames, numba available: {_accel.HAVE_NUMBA}")
    print(f"{'kernel':<14}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}")
    for name, loop, vec, call_args in (
        ("frame", kernels._frame_loop, kernels._frame_numpy, (x, w, hop, n)),
        ("overlap_add", kernels._ola_loop, kernels._ola_numpy, (frames, w, hop)),
    ):
        a = best_ms(lambda: loop(*call_args), args.repeat)
        b = best_ms(lambda: vec(*call_args), args.repeat)
        print(f"{name:<14}{a:>10.3f}{b:>10.3f}{b / a:>9.2f}")

    rt = best_ms(lambda: dsp.istft(dsp.stft(x, cfg), cfg, length=x.size), max(3, args.repeat // 4))
    print(f"stft+istft round trip ({_accel.backend()}): {rt:.2f} ms")


if __name__ == "__main__":
    main()
