"""Acceptance suite: one test per criterion, each recording a pass/fail line.

The trend criteria (5 to 10) run the synthetic benchmark at its defaults
(T=10, N=5, K=5, shift=0.3, MLP 2x64) over seeds 0-9.  Runs are shared
between criteria and pretraining is cached per seed.
"""

import csv
import math
import time

import numpy as np
import pytest

from conftest import central_diff, record_criterion, rel_err
from tsclab import nn
from tsclab.baselines.importance import estimate_fisher, estimate_mas
from tsclab.baselines.replay import ClassIndex, ReplayBuffer
from tsclab.config import RunConfig
from tsclab.consolidation import (ActivityState, TscConfig, TscState, compute_gate,
                                  consolidate_slow, run_tsc_task, stc_penalty)
from tsclab.evalkit import compute_bwt
from tsclab.runner import run_experiment, run_seed
from tsclab.seeding import rng_for
from tsclab.taskgen import StreamConfig, make_generator, sample_task
from tsclab.training import train_head_on_features

SEEDS = list(range(10))
QUIET = {"run.seeds": "0-9", "run.checkpoints": False, "run.confusion": False}

VARIANTS = {
    "st": {"method.name": "st"},
    "mr": {"method.name": "mr"},
    "jt": {"method.name": "jt"},
    "tsc": {"method.name": "tsc"},
    "tsc_beta0.1": {"tsc.beta": 0.1},
    "tsc_beta1": {"tsc.beta": 1.0},
    "tsc_k0": {"tsc.k": 0},
    "tsc_cp": {"tsc.penalty": "constant"},
    "tsc_shift0.1": {"stream.shift": 0.1},
    "tsc_shift0.6": {"stream.shift": 0.6},
    "ni_tsc": {"stream.mode": "new_instance", "stream.T": 5},
    "ni_tsc_k0": {"stream.mode": "new_instance", "stream.T": 5, "tsc.k": 0},
}


class Runs:
    def __init__(self, root):
        self.root = root
        self.cache = {}

    def metrics(self, name):
        """``{(seed, t): row}`` of one benchmark variant, running it on first use."""
        if name not in self.cache:
            values = {**QUIET, "method.name": "tsc", **VARIANTS[name], "run.name": name}
            run_dir = run_experiment(RunConfig(values), out=self.root)
            assert not (run_dir / "failures.csv").exists(), name
            with open(run_dir / "metrics.csv", newline="") as fh:
                rows = list(csv.DictReader(fh))
            self.cache[name] = ({(int(r["seed"]), int(r["t"])): r for r in rows}, run_dir)
        return self.cache[name][0]

    def run_dir(self, name):
        self.metrics(name)
        return self.cache[name][1]

    def column(self, name, col, t):
        m = self.metrics(name)
        return np.array([float(m[(s, t)][col]) for s in SEEDS])

    def final(self, name):
        T = 5 if name.startswith("ni_") else 10
        return self.column(name, "a_top1", T)


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    return Runs(tmp_path_factory.mktemp("bench"))


def pts(x):
    return 100.0 * x


# exact checks


def test_c01_gradient_exactness():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = {"loss": 0.0, "stc": 0.0, "mas": 0.0}
    for i in range(20):
        d_in, width, C = rng.integers(2, 5), rng.integers(2, 6), rng.integers(2, 4)
        act = ("relu", "tanh")[i % 2]
        spec = nn.NetworkSpec(int(d_in), ((int(width), act), (int(width), "tanh")), int(C),
                              seed=i)
        w = nn.init_weights(spec)
        X = rng.normal(size=(int(rng.integers(1, 6)), int(d_in)))
        y = rng.integers(0, C, X.shape[0])

        def loss(v):
            return nn.loss_and_grad(nn.WeightState(v, w.layout), spec, X, y)[0]

        worst["loss"] = max(worst["loss"],
                            rel_err(nn.loss_and_grad(w, spec, X, y)[1], central_diff(loss, w.values)))

        n = w.n_embedding
        slow = w.values[:n] + rng.normal(scale=0.3, size=n)
        gate = rng.uniform(0.01, 0.99, n)
        lam = float(rng.uniform(0.1, 2.0))
        g = stc_penalty(w.values[:n], slow, gate, lam)[1]
        fd = central_diff(lambda v: stc_penalty(v, slow, gate, lam)[0], w.values[:n])
        worst["stc"] = max(worst["stc"], rel_err(g, fd))

        x1 = X[:1]

        def sq_norm(v):
            out = nn.forward(nn.WeightState(v, w.layout), spec, x1)
            return float(np.sum(out * out))

        omega = estimate_mas(w, spec, x1).values
        worst["mas"] = max(worst["mas"], rel_err(omega, np.abs(central_diff(sq_norm, w.values))))
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) < 1e-4 and elapsed < 5.0
    record_criterion(1, ok, "gradient exactness: max rel err loss %.1e, STC %.1e, MAS %.1e "
                     "over 20 instances in %.2fs" % (worst["loss"], worst["stc"], worst["mas"],
                                                     elapsed))
    assert ok


def test_c02_gate_algebra():
    act = ActivityState(np.array([0.2, 0.4, 0.6]), 2, np.array([0.2]), np.full(3, 0.5), 1.0,
                        0.0, (3,))
    gate = compute_gate(act)
    sig = [1 / (1 + math.exp(-z)) for z in (0.0, 0.2, 0.4)]
    err = float(np.max(np.abs(gate - sig)))
    rng = np.random.default_rng(0)
    in_range, half, monotone = True, True, True
    for _ in range(200):
        n = int(rng.integers(2, 10))
        cum = rng.exponential(size=n)
        t = int(rng.integers(1, 8))
        a = ActivityState(cum, t, np.array([cum.mean() / t]), np.full(n, 0.5), 1.0, 0.0, (n,))
        g = compute_gate(a)
        in_range &= bool(np.all((g > 0) & (g < 1)))
        order = np.argsort(cum)
        monotone &= bool(np.all(np.diff(g[order]) > 0) or len(set(cum)) < n)
        # an entry sitting exactly on the threshold
        cum2 = cum.copy()
        cum2[0] = cum2.mean() / t
        a2 = ActivityState(cum2, t, np.array([cum2.mean() / t]), np.full(n, 0.5), 1.0, 0.0, (n,))
        half &= compute_gate(a2)[0] == 0.5 or not cum2[0] == cum2.mean() / t
    ok = err <= 1e-12 and in_range and half and monotone
    record_criterion(2, ok, f"gate algebra: t=2 example max err {err:.1e}; range {in_range}, "
                     f"0.5 at threshold {half}, monotone {monotone}")
    assert ok


def test_c03_slow_update_algebra():
    rng = np.random.default_rng(1)
    spec = nn.NetworkSpec(5, ((7, "relu"), (6, "relu")), 4, seed=3)
    layout = nn.build_layout(spec)
    n = layout[-1].stop
    worst = 0.0
    for _ in range(50):
        s = nn.WeightState(rng.normal(size=n), layout)
        f = nn.WeightState(rng.normal(size=n), layout)
        beta = float(rng.uniform())
        out = consolidate_slow(s, f, beta).values
        worst = max(worst, float(np.max(np.abs(out - ((1 - beta) * s.values + beta * f.values)))))
    same = np.array_equal(consolidate_slow(s, f, 0.0).values, s.values)
    copy = np.array_equal(consolidate_slow(s, f, 1.0).values, f.values)
    ok = worst <= 1e-15 and same and copy
    record_criterion(3, ok, f"slow update: max deviation from interpolation {worst:.1e}; "
                     f"beta=0 no-op {same}, beta=1 copy {copy}")
    assert ok


def test_c04_compositional_oracle():
    stream = make_generator(StreamConfig(T=3, seed=4))[1]
    spec = nn.NetworkSpec(32, ((64, "relu"), (64, "relu")), 0, seed=9)
    w0 = nn.init_weights(spec)
    cfg = TscConfig(beta=0.0, k=0, lam=0.0)
    state, replay = TscState.start(w0, spec, cfg), ReplayBuffer()
    # independently scripted pipeline: frozen features, head over the growing replay set
    classes, h, n_e = ClassIndex(), 64, w0.values.size
    W, b = np.zeros((0, h)), np.zeros(0)
    Xs, ids = [], []
    identical = True
    for t in (1, 2, 3):
        train, _ = sample_task(stream, t)
        state, _ = run_tsc_task(state, train, stream, replay, cfg)
        old = len(classes)
        classes.add(train.classes)
        c = len(classes)
        head = np.concatenate([np.vstack([W, np.zeros((c - old, h))]).ravel(),
                               np.concatenate([b, np.zeros(c - old)])])
        Xs.append(train.X)
        ids.append(train.class_ids)
        X, y = np.concatenate(Xs), classes.rows(np.concatenate(ids))
        train_head_on_features(head, c, nn.embed(w0, X), y, cfg.max_epochs, cfg.batch_size,
                               cfg.optim, rng_for(4, "tsc-head", t), cfg.plateau_tol,
                               cfg.patience)
        identical &= np.array_equal(state.fast.values, np.concatenate([w0.values, head]))
        fW, fb = head[: c * h].reshape(c, h), head[c * h :]
        W, b = np.vstack([W, fW[old:]]), np.concatenate([b, fb[old:]])
        identical &= np.array_equal(state.slow.values, np.concatenate([w0.values, W.ravel(), b]))
    record_criterion(4, identical, "compositional oracle (beta=0, k=0, lam=0) over 3 tasks: "
                     f"bit-identical {identical}")
    assert identical


# benchmark trends


def test_c05_forgetting(runs):
    st, mr, jt = runs.final("st"), runs.final("mr"), runs.final("jt")
    gap = pts(mr.mean() - st.mean())
    paired = int(np.sum(mr < jt))
    ok = gap >= 10 and mr.mean() < jt.mean() and paired >= 8
    record_criterion(5, ok, f"forgetting: A10 ST {st.mean():.4f}, MR {mr.mean():.4f}, "
                     f"JT {jt.mean():.4f}; MR-ST {gap:.1f} pts (need >= 10); "
                     f"MR<JT in {paired}/10 seeds (need >= 8)")
    assert ok


def test_c06_tsc_vs_replay(runs):
    tsc, mr, jt = runs.final("tsc"), runs.final("mr"), runs.final("jt")
    over_mr = pts(tsc.mean() - mr.mean())
    vs_jt = pts(tsc.mean() - jt.mean())
    paired = int(np.sum(tsc > mr))
    ok = over_mr >= 5 and vs_jt >= -1 and paired >= 9
    record_criterion(6, ok, f"TSC vs MR: A10 TSC {tsc.mean():.4f}, MR {mr.mean():.4f}, "
                     f"JT {jt.mean():.4f}; TSC-MR {over_mr:+.1f} pts (need >= 5), "
                     f"TSC-JT {vs_jt:+.1f} pts (need >= -1), TSC>MR in {paired}/10 (need >= 9)")
    assert ok


def test_c07_beta_ablation(runs):
    a001, a01, a1 = (runs.final(n).mean() for n in ("tsc", "tsc_beta0.1", "tsc_beta1"))
    ok = a001 > a01 > a1
    record_criterion(7, ok, f"beta ablation: A10 beta=0.01 {a001:.4f}, 0.1 {a01:.4f}, "
                     f"1 {a1:.4f} (need strictly decreasing)")
    assert ok


def test_c08_k_ablation(runs):
    k100, k0, cp = (runs.final(n).mean() for n in ("tsc", "tsc_k0", "tsc_cp"))
    ok = k100 > k0 and k100 >= cp
    record_criterion(8, ok, f"k ablation: A10 k=100+Reg {k100:.4f}, k=0 {k0:.4f}, "
                     f"k=100+CP {cp:.4f} (need Reg > k=0 and Reg >= CP)")
    assert ok


def test_c09_few_shot_improvement(runs):
    delta = {}
    for name in ("tsc", "tsc_shift0.1", "tsc_shift0.6"):
        delta[name] = runs.column(name, "probe_nc", 10) - runs.column(name, "probe_nc", 0)
    d, lo, hi = (pts(delta[n].mean()) for n in ("tsc", "tsc_shift0.1", "tsc_shift0.6"))
    ok = d > 0 and hi > lo
    record_criterion(9, ok, f"NC probe after task 10 minus before task 1: shift 0.3 {d:+.2f} pts "
                     f"(need > 0); shift 0.1 {lo:+.2f}, shift 0.6 {hi:+.2f} (need 0.6 > 0.1)")
    assert ok


def test_c10_new_instance(runs):
    p1, p5 = runs.column("ni_tsc", "probe_nc", 1), runs.column("ni_tsc", "probe_nc", 5)
    k0 = runs.column("ni_tsc_k0", "probe_nc", 5)
    gain = pts((p5 - p1).mean())
    over_k0 = pts(p5.mean() - k0.mean())
    ok = gain > 0 and over_k0 > 0
    record_criterion(10, ok, f"new-instance fresh-batch probe: batch 5 minus batch 1 {gain:+.2f} "
                     f"pts (need > 0); TSC minus TSC(k=0) at batch 5 {over_k0:+.2f} pts "
                     "(need > 0)")
    assert ok


# bookkeeping


def test_c11_bwt():
    bwt = compute_bwt([[0.8], [0.75, 0.7], [0.6, 0.7, 0.9]])
    frozen = compute_bwt([[0.8], [0.8, 0.7], [0.8, 0.7, 0.9]])
    ok = abs(bwt - (-0.1)) < 1e-15 and frozen == 0.0
    record_criterion(11, ok, f"BWT: hand example {bwt!r} (need -0.1); frozen snapshots {frozen!r}")
    assert ok


def test_c12_determinism_and_resume(tmp_path):
    cfg = RunConfig({"run.seeds": "3", "method.name": "tsc"})
    a = run_experiment(cfg, run_dir=tmp_path / "a")
    b = run_experiment(cfg, run_dir=tmp_path / "b")
    names = ("metrics.csv", "fisher.csv", "confusion/seed_3_t10.csv")
    repeat = all((a / n).read_bytes() == (b / n).read_bytes() for n in names)
    run_seed(cfg, 3, tmp_path / "c", stop_after=3, cache_dir=tmp_path / "pretrain")
    c = run_experiment(cfg, run_dir=tmp_path / "c", resume=True)
    resumed = all((a / n).read_bytes() == (c / n).read_bytes() for n in names)
    ok = repeat and resumed
    record_criterion(12, ok, f"determinism: repeat run byte-identical {repeat}; resume from "
                     f"task 3 byte-identical {resumed}")
    assert ok


def test_c13_fisher(runs):
    theta1, theta2 = 0.7, -0.3
    spec = nn.NetworkSpec(1, ((1, "relu"),), 2)
    w = nn.WeightState(np.array([1.0, 0.0, 0.0, theta1, 0.0, theta2]), nn.build_layout(spec))
    xs, ys = [0.5, 1.0, 2.0, 3.0], [1, 0, 1, 0]
    F = estimate_fisher(w, spec, np.array(xs)[:, None], ys).values
    p = [1 / (1 + math.exp(-(theta1 * x + theta2))) for x in xs]
    oracle = (np.mean([((y - q) * x) ** 2 for x, y, q in zip(xs, ys, p)]),
              np.mean([(y - q) ** 2 for y, q in zip(ys, p)]))
    err = max(abs(F[3] - oracle[0]), abs(F[5] - oracle[1]))
    series_ok = True
    for name in ("tsc", "tsc_beta0.1", "tsc_beta1", "tsc_k0", "tsc_cp", "tsc_shift0.1",
                 "tsc_shift0.6", "ni_tsc", "ni_tsc_k0"):
        with open(runs.run_dir(name) / "fisher.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        T = 5 if name.startswith("ni_") else 10
        keys = {(int(r["seed"]), int(r["t"]), int(r["layer"])) for r in rows}
        series_ok &= keys == {(s, t, l) for s in SEEDS for t in range(1, T + 1) for l in (0, 1)}
        series_ok &= all(float(r["mean_fisher"]) >= 0 for r in rows)
    ok = err <= 1e-10 and series_ok
    record_criterion(13, ok, f"Fisher: logistic oracle max err {err:.1e}; per-layer series present "
                     f"and non-negative for every TSC run {series_ok}")
    assert ok
