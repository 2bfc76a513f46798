"""Time the compiled kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Both paths are imported side by side from ``patchdistill.kernels`` regardless
of the PATCHDISTILL_BACKEND setting, checked for identical output, then timed
(best of ``--repeat`` runs after one warm-up call that also triggers compilation).
"""

from __future__ import annotations

import argparse
import json
import logging
import time

import numpy as np

from patchdistill import kernels
from patchdistill._accel import NUMBA_AVAILABLE
from patchdistill.emipld import top_k

log = logging.getLogger("bench_kernels")


def _best_of(fn, args, repeat: int) -> float:
    fn(*args)  # warm-up / JIT compile
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def _clahe_case(h: int, w: int, rng):
    img = rng.integers(0, 256, (h, w)).astype(np.uint8)
    tiles = 8
    th, tw = h // tiles, w // tiles
    clip = max(int(2.0 * th * tw / 256), 1)
    luts = kernels.clahe_luts_numpy(img, tiles, tiles, clip)
    return [
        (f"clahe_luts {w}x{h}", kernels.clahe_luts_numba, kernels.clahe_luts_numpy, (img, tiles, tiles, clip)),
        (f"clahe_interpolate {w}x{h}", kernels.clahe_interpolate_numba, kernels.clahe_interpolate_numpy,
         (img, luts, th, tw)),
    ]


def build_cases(rng) -> list:
    cases = _clahe_case(192, 256, rng) + _clahe_case(896, 1200, rng)
    ranks_in = rng.integers(0, 1000, 200_000).astype(np.float64)  # many ties
    cases.append(("midranks 200k", kernels.midranks_numba, kernels.midranks_numpy, (ranks_in,)))
    scores = rng.random((20_000, 12))
    cases.append(("relabel 20000x12", kernels.irat_labels_numba, kernels.irat_labels_numpy,
                  (scores, 0.3, top_k(0.45, 12))))
    return cases


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--json", help="also write the timings here")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    if not NUMBA_AVAILABLE:
        log.warning("numba is not importable; both columns time the numpy path")

    rows = []
    for name, fast, slow, fargs in build_cases(np.random.default_rng(args.seed)):
        a, b = fast(*fargs), slow(*fargs)
        if not np.array_equal(a, b):
            raise SystemExit(f"{name}: compiled and numpy outputs differ")
        t_fast, t_slow = _best_of(fast, fargs, args.repeat), _best_of(slow, fargs, args.repeat)
        rows.append({"kernel": name, "numba_ms": t_fast * 1e3, "numpy_ms": t_slow * 1e3,
                     "speedup": t_slow / t_fast if t_fast > 0 else float("nan")})

    width = max(len(r["kernel"]) for r in rows)
    print(f"{'kernel'.ljust(width)}  {'numba ms':>10}  {'numpy ms':>10}  {'speedup':>8}")
    for r in rows:
        print(f"{r['kernel'].ljust(width)}  {r['numba_ms']:10.3f}  {r['numpy_ms']:10.3f}  {r['speedup']:7.1f}x")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(rows, fh, indent=2)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
