#!/usr/bin/env python3
"""Benchmark: compiled kernels vs the pure-Python fallback.

Times the hot kernels from both backends directly, then the end-to-end
diversified build + replication through each backend (subprocess, since
the backend is chosen at import time via DIVSYM_PURE).

Run from the repository root after `python setup.py build_ext --inplace`:

    python benchmarks/bench_kernels.py
"""

import os
import subprocess
import sys
import timeit

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from divsym import _kernels_py  # noqa: E402

try:
    from divsym import _kernels
except ImportError:
    _kernels = None

THRESHOLD = (1 << 32) // 5

PIPELINE_SNIPPET = r"""
import time
from divsym._speed import BACKEND
from divsym.progmodel import BuildOptions, generate_corpus
from divsym.diversify import SeedTuple, build_default, build_diversified
from divsym.replicate import replicate
from divsym.deltadata import diff, apply, pack, delta_from_options

opts = BuildOptions()
model = generate_corpus(0xBE7C, 1, "medium")[0]
t0 = time.perf_counter()
dres, log = build_default(model, opts)
seeds = SeedTuple(11, 22, 33)
truth, dec = build_diversified(model, seeds, opts)
approx = replicate(dres.symfile, log, seeds, opts)
patch = diff(approx, truth.symfile)
pack(delta_from_options(seeds, opts, patch))
print("%s %.3f" % (BACKEND, time.perf_counter() - t0))
"""


def bench(label, fn, number):
    t = timeit.timeit(fn, number=number)
    per = t / number
    print("  %-28s %10.2f us/call  (%d calls, %.3fs)"
          % (label, per * 1e6, number, t))
    return t


def bench_backend(name, mod):
    print("%s backend:" % name)
    bench("nop_gaps(1e4 gaps)",
          lambda: mod.nop_gaps(0x5EED, 10000, THRESHOLD), 200)
    data = b"fn042_dead@fn042_dead.o:.text.fn042_dead"
    bench("fnv1a64(41-byte id)", lambda: mod.fnv1a64(data), 20000)
    bench("reseed(id, seed)", lambda: mod.reseed(data, 0xABCDEF), 20000)
    vals = list(range(0, 1 << 22, 41))
    bench("arm_imm_encodable(1e5)",
          lambda: [mod.arm_imm_encodable(v) for v in vals[:100000]], 3)


def bench_pipeline():
    print("end-to-end (1 medium program: default + diversified + replicate + diff + pack):")
    for pure in ("0", "1"):
        env = dict(os.environ, DIVSYM_PURE=pure,
                   PYTHONPATH=os.path.join(os.path.dirname(__file__), "..", "src"))
        out = subprocess.run([sys.executable, "-c", PIPELINE_SNIPPET], env=env,
                             capture_output=True, text=True)
        line = out.stdout.strip() or out.stderr.strip()
        print("  %s" % line)


def main():
    if _kernels is not None:
        bench_backend("cython", _kernels)
    else:
        print("cython backend: not built (python setup.py build_ext --inplace)")
    bench_backend("python", _kernels_py)
    bench_pipeline()


if __name__ == "__main__":
    main()
