"""Compare the compiled and NumPy kernel backends.

    python benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Times each kernel on the benchmark network (32 -> 64 -> 64 -> C) at a few
batch sizes, plus one TSC task end to end, and checks that both backends
agree before timing them.
"""

from __future__ import annotations

import argparse
import json
import timeit

import numpy as np

from tsclab import kernels, nn
from tsclab.kernels import available_backends

KERNELS = ("forward", "embed", "loss_grad", "vjp", "adam_update")


def _bind(mod):
    for name in KERNELS:
        setattr(kernels, name, getattr(mod, name))


def _inputs(batch, classes=25, seed=0):
    spec = nn.NetworkSpec(32, ((64, "relu"), (64, "relu")), classes, seed=seed)
    w = nn.init_weights(spec)
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(batch, 32))
    y = rng.integers(0, classes, batch).astype(np.int64)
    return w, X, y


def kernel_cases(batch):
    w, X, y = _inputs(batch)
    dl = np.random.default_rng(1).normal(size=(batch, 25))
    n = w.values.size
    g = np.random.default_rng(2).normal(size=n)

    def adam(mod):
        v, m1, m2 = w.values.copy(), np.zeros(n), np.zeros(n)
        return lambda: mod.adam_update(v, g, m1, m2, 1, 5e-4, 0.5, 0.999, 1e-8)

    return {
        "forward": lambda mod: (lambda: mod.forward(w.values, w.table, X)),
        "loss_grad": lambda mod: (lambda: mod.loss_grad(w.values, w.table, X, y, 0)),
        "vjp": lambda mod: (lambda: mod.vjp(w.values, w.table, X, dl)),
        "adam_update": adam,
    }


def check_agreement(backends):
    w, X, y = _inputs(25)
    ref = backends["python"].loss_grad(w.values, w.table, X, y, 0)
    for name, mod in backends.items():
        loss, grad = mod.loss_grad(w.values, w.table, X, y, 0)
        if abs(loss - ref[0]) > 1e-12 or np.max(np.abs(grad - ref[1])) > 1e-12:
            raise SystemExit(f"backend {name} disagrees with the NumPy reference")


def time_task(mod, repeat):
    from tsclab.baselines.replay import ReplayBuffer
    from tsclab.consolidation import TscConfig, TscState, run_tsc_task
    from tsclab.taskgen import StreamConfig, make_generator, sample_task

    _bind(mod)
    _, stream = make_generator(StreamConfig(seed=0))
    spec = nn.NetworkSpec(32, ((64, "relu"), (64, "relu")), 0, seed=0)
    w0 = nn.init_weights(spec)

    def once():
        state, replay = TscState.start(w0, spec, TscConfig()), ReplayBuffer()
        for t in (1, 2, 3):
            run_tsc_task(state, sample_task(stream, t)[0], stream, replay, TscConfig())

    return min(timeit.repeat(once, number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write results here")
    args = ap.parse_args(argv)

    backends = available_backends()
    if "c" not in backends:
        print("compiled kernels are not built; only the NumPy backend is available")
    check_agreement(backends)
    original = {name: getattr(kernels, name) for name in KERNELS}
    results = []
    try:
        for batch in (25, 125, 500):
            for kernel, make in kernel_cases(batch).items():
                row = {"kernel": kernel, "batch": batch}
                for name, mod in backends.items():
                    fn = make(mod)
                    number = max(1, int(2000 / batch))
                    best = min(timeit.repeat(fn, number=number, repeat=args.repeat))
                    row[name] = best / number * 1e6
                results.append(row)
        task = {"kernel": "tsc 3 tasks", "batch": 25}
        for name, mod in backends.items():
            task[name] = time_task(mod, max(1, args.repeat // 2)) * 1e6
        results.append(task)
    finally:
        for name, fn in original.items():
            setattr(kernels, name, fn)

    names = sorted(backends)
    print(f"{'kernel':<14}{'batch':>6}" + "".join(f"{n + ' us':>14}" for n in names)
          + ("  speedup" if "c" in backends else ""))
    for r in results:
        line = f"{r['kernel']:<14}{r['batch']:>6}" + "".join(f"{r[n]:>14.1f}" for n in names)
        if "c" in backends:
            line += f"  {r['python'] / r['c']:7.2f}x"
        print(line)
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=1)


if __name__ == "__main__":
    main()
