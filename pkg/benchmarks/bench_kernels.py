"""Compiled vs pure-Python kernel timings; forwards to ``maskfuse.bench``.

    python benchmarks/bench_kernels.py --size 512 --count 100
"""
import sys

from maskfuse.bench import main

if __name__ == "__main__":
    sys.exit(main())
