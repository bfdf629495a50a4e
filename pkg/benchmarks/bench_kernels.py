"""Time the numba kernels against their numpy fallbacks.

Shapes follow one tiny-preset training step (batch 16, 8 frames, 17 tokens,
side width 32).  A full forward/backward step is timed under each backend
too, since the kernels are only part of the work there.

    python benchmarks/bench_kernels.py [--repeat 50] [--json out.json]
"""
import argparse
import json
import time

import numpy as np

from tdsnet.autodiff import kernels
from tdsnet.autodiff.tensor import backward
from tdsnet.data import DatasetSpec, make_dataset, stack
from tdsnet.network import MODEL_PRESETS, TDSModel, ls_cross_entropy, network_forward

ROWS = 16 * 8 * 17  # tokens in one tiny batch


def kernel_cases(rng):
    x = rng.normal(size=(ROWS, 32))
    g = rng.normal(size=32)
    b = rng.normal(size=32)
    scores = rng.normal(size=(16 * 8 * 4 * 17, 17))
    vol = rng.normal(size=(16 * 16, 8, 4, 4))
    _, xhat, rstd = kernels.layer_norm_fwd(x, g, b, 1e-5)
    probs = kernels.softmax_fwd(scores)
    pooled, idx = kernels.maxpool_fwd(vol, 3, 1, 1)
    hidden = rng.normal(size=(ROWS, 128))
    return {
        "layer_norm_fwd": lambda: kernels.layer_norm_fwd(x, g, b, 1e-5),
        "layer_norm_bwd": lambda: kernels.layer_norm_bwd(x, xhat, rstd, g),
        "gelu_fwd": lambda: kernels.gelu_fwd(hidden),
        "gelu_bwd": lambda: kernels.gelu_bwd(hidden, hidden),
        "softmax_fwd": lambda: kernels.softmax_fwd(scores),
        "softmax_bwd": lambda: kernels.softmax_bwd(scores, probs),
        "maxpool_fwd": lambda: kernels.maxpool_fwd(vol, 3, 1, 1),
        "maxpool_bwd": lambda: kernels.maxpool_bwd(pooled, idx, vol.shape),
    }


def best_of(fn, repeat):
    fn()  # compile / warm caches
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times), float(np.median(times))


def train_step_case():
    cfg = MODEL_PRESETS["tiny"]
    model = TDSModel(cfg)
    clips, _ = make_dataset(DatasetSpec(clips_per_class=4, val_per_class=0))
    x, y = stack(clips[:16])

    def step():
        backward(ls_cross_entropy(network_forward(x, cfg, model), y, cfg.label_smoothing))

    return step


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=50)
    ap.add_argument("--json", help="also write the results here")
    args = ap.parse_args()

    results = {}
    for backend in kernels.BACKENDS:
        kernels.set_backend(backend)
        cases = kernel_cases(np.random.default_rng(0))
        cases["train_step"] = train_step_case()
        for name, fn in cases.items():
            reps = max(3, args.repeat // 10) if name == "train_step" else args.repeat
            results.setdefault(name, {})[backend] = best_of(fn, reps)

    print(f"{'kernel':<16}{'numba ms':>12}{'numpy ms':>12}{'speedup':>10}")
    for name, r in results.items():
        nb, npy = r["numba"][0] * 1e3, r["numpy"][0] * 1e3
        print(f"{name:<16}{nb:>12.3f}{npy:>12.3f}{npy / nb:>9.2f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({k: {b: {"best_s": v[0], "median_s": v[1]} for b, v in r.items()}
                       for k, r in results.items()}, fh, indent=2)


if __name__ == "__main__":
    main()
