"""Compare the compiled and pure-Python tensor-core backends.

Run: ``python3 benchmarks/bench_kernels.py [--repeat N]``. Prints a table
of median wall-clock times per kernel and for whole model passes.
"""

from __future__ import annotations

import argparse
import statistics
import time

import numpy as np

from plateau_lab import tensor_core as tc
from plateau_lab.model import ModelConfig, embed_batch, forward, init_checkpoint
from plateau_lab.taskgen import gen_grounded_task
from plateau_lab.training import Batch, attach_projector, loss_and_grads


def _time(fn, repeat: int) -> float:
    fn()
    runs = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        runs.append(time.perf_counter() - t)
    return statistics.median(runs)


def workloads():
    rng = np.random.default_rng(0)
    scores = rng.standard_normal((32 * 4, 20, 20)).astype(np.float32)
    mask = tc.AttnMask.causal_mask(20)
    x = rng.standard_normal((32 * 20, 64)).astype(np.float32)
    gain = np.ones(64, dtype=np.float32)

    cfg = ModelConfig()
    ckpt = attach_projector(init_checkpoint(cfg, 0), 0)
    task = gen_grounded_task(0, 64, n_val=8, n_test=8)
    sp = task.split("train").head(32)
    x0, layout = embed_batch(ckpt, sp.vision, sp.pre, sp.ins)
    batch = Batch.from_split(sp, np.arange(32))

    return {
        "masked_softmax (128x20x20)": lambda: tc.masked_softmax(scores, mask),
        "rms_norm (640x64)": lambda: tc.rms_norm(x, gain),
        "forward B=32": lambda: forward(ckpt, x0, layout),
        "train step B=32": lambda: loss_and_grads(ckpt, batch),
    }


def main(argv=None) -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    backends = tc.available_backends()
    results: dict[str, dict[str, float]] = {}
    for backend in backends:
        tc.use_backend(backend)
        for name, fn in workloads().items():
            results.setdefault(name, {})[backend] = _time(fn, args.repeat)
    header = f"{'workload':<28}" + "".join(f"{b:>12}" for b in backends)
    if len(backends) == 2:
        header += f"{'speedup':>10}"
    print(header)
    for name, row in results.items():
        line = f"{name:<28}" + "".join(f"{row[b] * 1e3:>10.3f}ms" for b in backends)
        if len(backends) == 2:
            line += f"{row['python'] / row['compiled']:>9.2f}x"
        print(line)


if __name__ == "__main__":
    main()
