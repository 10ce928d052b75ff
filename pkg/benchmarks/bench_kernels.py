"""Compare the numpy and compiled kernel backends.

Times each hot kernel on transformer-shaped inputs, then a short full-depth
training run, and prints both backends side by side.  Run from the repo root:

    python3 benchmarks/bench_kernels.py
    python3 benchmarks/bench_kernels.py --rows 8192 --repeats 30
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from flexdepth import kernels
from flexdepth.data import DataConfig
from flexdepth.model import ModelConfig
from flexdepth.training import TrainConfig, pretrain


def kernel_cases(rows: int, width: int, vocab: int, rng):
    """One (name, fn, args) entry per kernel, with realistic shapes."""
    x = rng.standard_normal((rows, width))
    dy = rng.standard_normal((rows, width))
    gamma = rng.standard_normal(width)
    beta = rng.standard_normal(width)
    _, mean, rstd = kernels.layer_norm_forward(x, gamma, beta, 1e-5)

    scores = rng.standard_normal((rows, width))
    probs = kernels.softmax_forward(scores)
    dprobs = rng.standard_normal((rows, width))

    logits = rng.standard_normal((rows, vocab))
    targets = rng.integers(0, vocab, size=rows)
    weights = (rng.random(rows) < 0.9).astype(float)
    _, ce_probs = kernels.cross_entropy_forward(logits, targets, weights)

    return [
        ("layer_norm_forward", lambda: kernels.layer_norm_forward(x, gamma, beta, 1e-5)),
        ("layer_norm_backward", lambda: kernels.layer_norm_backward(dy, x, gamma, mean, rstd)),
        ("softmax_forward", lambda: kernels.softmax_forward(scores)),
        ("softmax_backward", lambda: kernels.softmax_backward(dprobs, probs)),
        ("cross_entropy_forward", lambda: kernels.cross_entropy_forward(logits, targets, weights)),
        ("cross_entropy_backward", lambda: kernels.cross_entropy_backward(ce_probs, targets, weights, 0.5)),
    ]


def best_of(fn, repeats: int) -> float:
    """Minimum wall time over `repeats` calls, in seconds."""
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def time_training(steps: int) -> float:
    """Wall time of a short full-depth training run on the copy task."""
    data = DataConfig("copy", 16, 3, 8)
    model = ModelConfig(4, 2, width=32, heads=2, ffn_width=64, vocab_size=16, max_len=12)
    train = TrainConfig(steps=steps, batch_tokens=512, peak_lr=1.5e-3, warmup=10, seed=0)
    t0 = time.perf_counter()
    pretrain(model, train, data)
    return time.perf_counter() - t0


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--rows", type=int, default=4096, help="rows per kernel input")
    parser.add_argument("--width", type=int, default=64, help="columns for norm/softmax inputs")
    parser.add_argument("--vocab", type=int, default=256, help="columns for cross-entropy logits")
    parser.add_argument("--repeats", type=int, default=20, help="calls per kernel; best time wins")
    parser.add_argument("--train-steps", type=int, default=40, help="steps for the training comparison")
    args = parser.parse_args()

    backends = kernels.available_backends()
    if len(backends) < 2:
        print("compiled backend not built; timing numpy only")

    rng = np.random.default_rng(0)
    results: dict[str, dict[str, float]] = {}
    train_times: dict[str, float] = {}
    for backend in backends:
        kernels.use_backend(backend)
        for name, fn in kernel_cases(args.rows, args.width, args.vocab, rng):
            fn()  # warm up
            results.setdefault(name, {})[backend] = best_of(fn, args.repeats)
        train_times[backend] = time_training(args.train_steps)

    label = max(len(n) for n in results) + 2
    print(f"kernel timings, best of {args.repeats} ({args.rows} rows)")
    header = f"{'kernel':<{label}}" + "".join(f"{b:>12}" for b in backends)
    if len(backends) == 2:
        header += f"{'speedup':>10}"
    print(header)
    for name, times in results.items():
        line = f"{name:<{label}}" + "".join(f"{times[b] * 1e6:>10.1f}us" for b in backends)
        if len(backends) == 2:
            line += f"{times[backends[0]] / times[backends[1]]:>9.2f}x"
        print(line)

    print(f"\nfull-depth training, {args.train_steps} steps")
    for backend in backends:
        print(f"{backend:<{label}}{train_times[backend]:>10.2f}s")
    if len(backends) == 2:
        ratio = train_times[backends[0]] / train_times[backends[1]]
        print(f"{'speedup':<{label}}{ratio:>9.2f}x")


if __name__ == "__main__":
    main()
