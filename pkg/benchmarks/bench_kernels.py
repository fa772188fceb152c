"""Compare the numba and numpy causal-softmax backends.

    python benchmarks/bench_kernels.py [--repeats 20]

Also times one full training step of the default toy model on each backend.
"""

import argparse
import time

import numpy as np

from rave import _kernels
from rave.model import ToyModel, ToyModelSpec, backward, forward
from rave.train import TrainConfig


def best_of(fn, repeats):
    fn()  # warm-up (and JIT compile on first use)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def kernel_cases(rng):
    for blocks, n in [(64 * 4, 12), (64 * 4, 64), (8, 512)]:
        logits = rng.normal(size=(blocks, n, n))
        grad = rng.normal(size=(blocks, n, n))
        yield f"softmax fwd+bwd  {blocks}x{n}x{n}", logits, grad


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=20)
    args = parser.parse_args()
    rng = np.random.default_rng(0)

    rows = []
    for label, logits, grad in kernel_cases(rng):
        def run(logits=logits, grad=grad):
            probs = _kernels.causal_softmax(logits)
            _kernels.causal_softmax_grad(probs, grad)
        rows.append((label, run))

    model = ToyModel.create(ToyModelSpec(variant="rave"), seed=0, gate_init="half")
    batch = TrainConfig().batch(0)

    def step():
        backward(model, forward(model, batch.tokens, batch.segmap, batch.targets, keep_cache=True))
    rows.append(("toy train step (batch 64)", step))

    print(f"{'case':<34}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}")
    for label, fn in rows:
        timing = {}
        for name in ("numba", "numpy"):
            prev = _kernels.use_backend(name)
            try:
                timing[name] = best_of(fn, args.repeats) * 1e3
            finally:
                _kernels.use_backend(prev)
        print(f"{label:<34}{timing['numba']:>10.3f}{timing['numpy']:>10.3f}"
              f"{timing['numpy'] / timing['numba']:>8.2f}x")


if __name__ == "__main__":
    main()
