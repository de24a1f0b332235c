"""Benchmark the numba kernels against the pure-numpy fallback.

Times the attention and layer-norm kernels (forward and backward) at a few
training-realistic shapes, plus one full model forward/backward.  Run under
each backend to compare:

    DECOUPLE_BACKEND=numpy python benchmarks/bench_kernels.py
    DECOUPLE_BACKEND=numba python benchmarks/bench_kernels.py

or with no argument to benchmark both in subprocesses.
"""

from __future__ import annotations

import json
import os
import subprocess
import sys
import time

import numpy as np


def _bench(fn, *args, repeats: int = 20, warmup: int = 3) -> float:
    for _ in range(warmup):
        fn(*args)
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn(*args)
    return (time.perf_counter() - t0) / repeats


def run_current_backend() -> dict[str, float]:
    from decouple.seqmodel import ModelConfig, backward, forward, init_params
    from decouple.seqmodel.backend import active_backend
    from decouple.seqmodel.kernels import (
        attention_backward,
        attention_forward,
        layernorm_backward,
        layernorm_forward,
    )

    rng = np.random.default_rng(0)
    results: dict[str, float] = {}

    for B, H, T, Dh in [(32, 4, 48, 16), (64, 4, 64, 16)]:
        q, k, v = (rng.normal(size=(B, H, T, Dh)) for _ in range(3))
        bias = rng.normal(size=(B, H, T, T)) * 0.01
        out, probs = attention_forward(q, k, v, bias)
        dout = rng.normal(size=out.shape)
        results[f"attention_fwd_{B}x{H}x{T}x{Dh}"] = _bench(
            attention_forward, q, k, v, bias
        )
        results[f"attention_bwd_{B}x{H}x{T}x{Dh}"] = _bench(
            attention_backward, dout, q, k, v, probs
        )

    x = rng.normal(size=(64, 64, 64))
    g = np.ones(64)
    b = np.zeros(64)
    y, xhat, rstd = layernorm_forward(x, g, b)
    dy = rng.normal(size=x.shape)
    results["layernorm_fwd_64x64x64"] = _bench(layernorm_forward, x, g, b)
    results["layernorm_bwd_64x64x64"] = _bench(layernorm_backward, dy, xhat, rstd, g)

    cfg = ModelConfig(vocab_size=512, d_model=64, n_layers=2, n_heads=4,
                      max_seq_len=64)
    params = init_params(cfg, seed=0)
    ids = rng.integers(0, 512, size=(64, 48))
    tags = np.sort(rng.integers(0, 3, size=(64, 48)), axis=1)

    def model_step():
        logits, cache = forward(params, ids, tags)
        backward(params, cache, np.ones_like(logits) / logits.size)

    results["model_fwd_bwd_64x48_d64"] = _bench(model_step, repeats=5)
    results["__backend__"] = active_backend()
    return results


def main() -> None:
    if os.environ.get("DECOUPLE_BACKEND"):
        print(json.dumps(run_current_backend(), indent=2, default=str))
        return
    rows: dict[str, dict[str, float]] = {}
    for backend in ("numpy", "numba"):
        env = dict(os.environ, DECOUPLE_BACKEND=backend)
        proc = subprocess.run(
            [sys.executable, __file__], env=env, capture_output=True, text=True
        )
        if proc.returncode != 0:
            print(f"{backend} backend failed:\n{proc.stderr}", file=sys.stderr)
            continue
        rows[backend] = json.loads(proc.stdout)
    if not rows:
        sys.exit(1)
    names = [k for k in next(iter(rows.values())) if not k.startswith("__")]
    width = max(len(n) for n in names)
    print(f"{'kernel':<{width}}  {'numpy (ms)':>12}  {'numba (ms)':>12}  {'speedup':>8}")
    for name in names:
        t_np = rows.get("numpy", {}).get(name)
        t_nb = rows.get("numba", {}).get(name)
        if t_np is None or t_nb is None:
            continue
        print(f"{name:<{width}}  {1e3 * t_np:>12.3f}  {1e3 * t_nb:>12.3f}  "
              f"{t_np / t_nb:>7.2f}x")


if __name__ == "__main__":
    main()
