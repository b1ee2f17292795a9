"""Experiment driver: pretraining, per-seed runs, sweeps and reports.

Layout of a run directory::

    manifest.json            resolved config and column notes
    metrics.csv              all seeds, one row per (seed, t); t=0 is the pretrained baseline
    metrics/seed_<s>.csv     the same rows, per seed
    fisher.csv               per-layer mean Fisher of the embedding after each task
    confusion/seed_<s>_t<t>.csv
    streams/seed_<s>.json    stream manifest (class ids, means, seeds)
    checkpoints/seed_<s>/task_<t>.json
    failures.csv             present only if a seed aborted

Every number goes through ``repr(float)``, and nothing time-dependent is
written unless ``run.timing`` is on, so reruns of a config are
byte-identical.
"""

from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import logging
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .baselines.methods import BaselineLearner
from .checkpoint import load_checkpoint, load_weights, save_checkpoint, save_weights
from .config import RunConfig, dump_config
from .consolidation import TscLearner
from .errors import ConfigError, DataError, SchemaError, TscLabError
from .evalkit import Evaluator, row_normalize
from .kernels import BACKEND_NAME
from .nn import drop_head, init_weights
from .seeding import rng_for
from .taskgen import load_csv_dataset, make_generator, stream_manifest
from .training import OptimConfig, train_epochs

log = logging.getLogger("tsclab")

BASE_COLUMNS = ["seed", "method", "t", "a_top1", "a_top5", "bwt", "probe_nc", "probe_bc",
                "wall_ms"]
FISHER_COLUMNS = ["seed", "method", "t", "layer", "mean_fisher"]
FAILURE_COLUMNS = ["seed", "method", "t", "error"]


def metrics_columns(T: int) -> list:
    return BASE_COLUMNS + [f"r_{i}" for i in range(1, T + 1)]


def fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _json_text(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


# pretraining


def _pretrain_keys(cfg: RunConfig) -> dict:
    return {k: v for k, v in cfg.to_dict().items()
            if k.split(".")[0] in ("net", "pretrain", "stream") or k in ("optim.beta1",
                                                                         "optim.beta2",
                                                                         "optim.epsilon")}


def pretrain_key(cfg: RunConfig, seed: int) -> str:
    blob = json.dumps({"seed": seed, **_pretrain_keys(cfg)}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def support_pool(cfg: RunConfig, seed: int):
    pool, stream = make_generator(cfg.stream(seed))
    if cfg["pretrain.data"]:
        pool, _ = load_csv_dataset(cfg["pretrain.data"], stream.config.input_dim)
        overlap = set(pool.class_ids.tolist()) & set(stream.stream_class_ids)
        if overlap:
            log.info("CSV pool class ids overlap stream ids; they are separate label spaces")
    return pool, stream


def pretrain(cfg: RunConfig, seed: int, pool=None):
    """Supervised training on the support pool; returns the embedding with an empty head.

    Returns ``(weights, spec, loss_history)``.
    """
    if pool is None:
        pool, _ = support_pool(cfg, seed)
    if pool.n_classes == 0:
        raise DataError("support pool is empty")
    spec = cfg.network(seed, pool.input_dim, pool.n_classes)
    weights = init_weights(spec)
    history = []
    if cfg["pretrain.epochs"] > 0:
        data = pool.sample(cfg["pretrain.shots"])
        y = np.searchsorted(pool.class_ids, data.class_ids)
        optim = OptimConfig(cfg["pretrain.lr"], cfg["optim.beta1"], cfg["optim.beta2"],
                            cfg["optim.epsilon"])
        history = train_epochs(weights, data.X, y, cfg["pretrain.epochs"],
                               cfg["pretrain.batch_size"], optim, rng_for(seed, "pretrain"))
    weights, spec = drop_head(weights, spec)
    return weights, spec, history


def pretrained(cfg: RunConfig, seed: int, cache_dir: Path | None = None):
    """Pretrained ``(weights, spec)`` for a seed, reusing a cached checkpoint if it matches."""
    key = pretrain_key(cfg, seed)
    path = None if cache_dir is None else Path(cache_dir) / f"seed_{seed}_{key}.json"
    if path is not None and path.exists():
        weights, spec, _ = load_weights(path)
        return weights, spec
    weights, spec, history = pretrain(cfg, seed)
    if path is not None:
        save_weights(path, weights, spec, key=key, seed=seed,
                     loss_history=[float(h) for h in history])
    return weights, spec


# one seed


def make_learner(cfg: RunConfig, stream, weights, spec, evaluator):
    if cfg.method_name == "tsc":
        return TscLearner(stream, weights, spec, cfg.tsc(), evaluator)
    return BaselineLearner(stream, weights, spec, cfg.method(), evaluator)


def _record_row(seed, label, rec, T) -> list:
    r = [fmt(v) for v in rec.per_task] + [""] * (T - len(rec.per_task))
    return [str(seed), label, str(rec.t), fmt(rec.a_top1), fmt(rec.a_top5), fmt(rec.bwt),
            fmt(rec.probe_nc), fmt(rec.probe_bc), fmt(rec.wall_ms)] + r


def _confusion_text(counts, class_ids) -> str:
    header = ["class_id"] + [str(c) for c in class_ids]
    rows = [[str(c)] + [str(int(v)) for v in row] for c, row in zip(class_ids, counts)]
    return _csv_text(header, rows)


def _normalized_text(counts, class_ids) -> str:
    header = ["class_id"] + [str(c) for c in class_ids]
    rows = [[str(c)] + [fmt(v) for v in row]
            for c, row in zip(class_ids, row_normalize(counts))]
    return _csv_text(header, rows)


def _latest_checkpoint(ckpt_dir: Path):
    found = sorted(ckpt_dir.glob("task_*.json"), key=lambda p: int(p.stem.split("_")[1]))
    return found[-1] if found else None


def run_seed(cfg: RunConfig, seed: int, run_dir, resume: bool = False,
             stop_after: int | None = None, cache_dir=None) -> dict:
    """Run one seed; writes its per-seed files and returns rows for merging.

    ``stop_after`` ends the run after that task (used to test resumption).
    """
    run_dir = Path(run_dir)
    label = cfg.label
    T = cfg["stream.T"]
    rows, fisher_rows = [], []
    t_done = 0
    try:
        pool, stream = support_pool(cfg, seed)
        _write(run_dir / "streams" / f"seed_{seed}.json", _json_text(stream_manifest(stream)))
        weights, spec = pretrained(cfg, seed, cache_dir)
        evaluator = Evaluator(stream, cfg.probe(), probes=cfg["probe.enabled"],
                              fisher=cfg["run.fisher"], confusion=cfg["run.confusion"],
                              probe_seed=cfg["probe.seed"], timer=cfg["run.timing"])
        learner = make_learner(cfg, stream, weights, spec, evaluator)
        ckpt_dir = run_dir / "checkpoints" / f"seed_{seed}"
        latest = _latest_checkpoint(ckpt_dir) if resume else None
        if latest is not None:
            doc = load_checkpoint(latest, "run-state")
            if doc["config"] != cfg.to_dict():
                raise ConfigError(f"{latest}: checkpoint was written by a different config")
            learner.load_state_dict(doc["learner"])
            evaluator.load_state_dict(doc["evaluator"])
            rows, fisher_rows = doc["rows"], doc["fisher_rows"]
            t_done = int(doc["t"])
        else:
            probe = evaluator.probes(weights, spec) if cfg["probe.enabled"] else {}
            rows.append([str(seed), label, "0", "", "", "", fmt(probe.get("nc")),
                         fmt(probe.get("bc")), ""] + [""] * T)
        last = T if stop_after is None else min(T, stop_after)
        for t in range(t_done + 1, last + 1):
            rec = learner.step(t)
            rows.append(_record_row(seed, label, rec, T))
            if rec.fisher_layer_means is not None:
                fisher_rows.extend([str(seed), label, str(t), str(i), fmt(v)]
                                   for i, v in enumerate(rec.fisher_layer_means))
            if rec.confusion is not None:
                ids = learner_class_ids(learner)
                _write(run_dir / "confusion" / f"seed_{seed}_t{t}.csv",
                       _confusion_text(rec.confusion, ids))
                if t == T:
                    _write(run_dir / "confusion" / f"seed_{seed}_t{t}_normalized.csv",
                           _normalized_text(rec.confusion, ids))
            if cfg["run.checkpoints"]:
                save_checkpoint(ckpt_dir / f"task_{t}.json", "run-state", {
                    "seed": seed, "t": t, "config": cfg.to_dict(),
                    "learner": learner.state_dict(), "evaluator": evaluator.state_dict(),
                    "rows": rows, "fisher_rows": fisher_rows,
                })
            t_done = t
    except (TscLabError, ValueError, FloatingPointError, IndexError, OSError) as exc:
        log.error("seed %s aborted at task %s: %s", seed, t_done + 1, exc)
        log.debug("%s", traceback.format_exc())
        failure = [str(seed), label, str(t_done + 1), f"{type(exc).__name__}: {exc}"]
        _write(run_dir / "metrics" / f"seed_{seed}.csv", _csv_text(metrics_columns(T), rows))
        return {"seed": seed, "rows": rows, "fisher": fisher_rows, "failure": failure}
    _write(run_dir / "metrics" / f"seed_{seed}.csv", _csv_text(metrics_columns(T), rows))
    return {"seed": seed, "rows": rows, "fisher": fisher_rows, "failure": None}


def learner_class_ids(learner) -> list:
    classes = learner.state.classes if isinstance(learner, TscLearner) else learner.classes
    return classes.class_ids


def _seed_job(args):
    values, seed, run_dir, resume, cache_dir = args
    return run_seed(RunConfig(values), seed, run_dir, resume, cache_dir=cache_dir)


def run_dir_for(cfg: RunConfig, out=None) -> Path:
    root = Path(out if out is not None else cfg["run.out"])
    return root / (cfg["run.name"] or cfg.label)


def manifest(cfg: RunConfig) -> dict:
    return {
        "tsclab_version": __version__,
        "kernel_backend": BACKEND_NAME,
        "label": cfg.label,
        "method": cfg.method_name,
        "seeds": cfg.seeds(),
        "config": cfg.to_dict(),
        "metrics_columns": metrics_columns(cfg["stream.T"]),
        "notes": {
            "t0": "t=0 rows hold the probes of the pretrained embedding",
            "a_top5": "recorded as 1.0 while fewer than 6 classes are live",
            "bwt": "mean over i<t of R[t,i] - R[i,i], absolute accuracy points as fractions",
            "wall_ms": "blank unless run.timing is true",
            "probe_nc": "fresh-batch probe in new_instance streams",
        },
    }


def run_experiment(cfg: RunConfig, out=None, resume: bool = False, run_dir=None) -> Path:
    """Run every seed of ``cfg``; returns the run directory."""
    run_dir = Path(run_dir) if run_dir is not None else run_dir_for(cfg, out)
    run_dir.mkdir(parents=True, exist_ok=True)
    cache_dir = run_dir.parent / "pretrain"
    _write(run_dir / "manifest.json", _json_text(manifest(cfg)))
    _write(run_dir / "config.txt", dump_config(cfg))
    seeds = cfg.seeds()
    jobs = [(cfg.to_dict(), s, str(run_dir), resume, str(cache_dir)) for s in seeds]
    if cfg["run.workers"] > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=cfg["run.workers"]) as pool:
            results = list(pool.map(_seed_job, jobs))
    else:
        results = [_seed_job(j) for j in jobs]
    T = cfg["stream.T"]
    rows = [r for res in results for r in res["rows"]]
    _write(run_dir / "metrics.csv", _csv_text(metrics_columns(T), rows))
    fisher = [r for res in results for r in res["fisher"]]
    if fisher:
        _write(run_dir / "fisher.csv", _csv_text(FISHER_COLUMNS, fisher))
    failures = [res["failure"] for res in results if res["failure"] is not None]
    fail_path = run_dir / "failures.csv"
    if failures:
        _write(fail_path, _csv_text(FAILURE_COLUMNS, failures))
    elif fail_path.exists():
        fail_path.unlink()
    return run_dir


def pretrain_all(cfg: RunConfig, out=None) -> list:
    """Pretrain (or reuse) the checkpoint of every seed; returns their paths."""
    cache_dir = run_dir_for(cfg, out).parent / "pretrain"
    paths = []
    for seed in cfg.seeds():
        pretrained(cfg, seed, cache_dir)
        paths.append(cache_dir / f"seed_{seed}_{pretrain_key(cfg, seed)}.json")
    return paths


# sweeps


def parse_grid(specs) -> dict:
    """``["tsc.beta=0,0.01", "tsc.k=0,100"]`` to ``{"tsc.beta": [...], ...}``."""
    grid = {}
    for item in specs:
        if "=" not in item:
            raise ConfigError(f"grid entry {item!r} must look like key=v1,v2")
        key, values = item.split("=", 1)
        vals = [v.strip() for v in values.split(",") if v.strip()]
        if not vals:
            raise ConfigError(f"grid entry {item!r} has no values")
        grid[key.strip()] = vals
    return grid


def sweep(cfg: RunConfig, grid: dict, out=None) -> Path:
    """One run per grid point, merged into a single metrics CSV."""
    root = run_dir_for(cfg, out)
    keys = list(grid)
    merged, header = [], None
    for combo in itertools.product(*(grid[k] for k in keys)):
        tag = ";".join(f"{k.split('.', 1)[-1]}={v}" for k, v in zip(keys, combo))
        variant = RunConfig(cfg.values).update(dict(zip(keys, combo)))
        variant = variant.update({"run.label": f"{cfg.label}[{tag}]"})
        run_dir = run_experiment(variant, run_dir=root / tag.replace("=", "_").replace(";", "__"))
        with (run_dir / "metrics.csv").open(newline="") as fh:
            reader = csv.reader(fh)
            h = next(reader)
            if header is None:
                header = h
            elif h != header:
                raise SchemaError(f"{run_dir / 'metrics.csv'}: columns differ across the sweep")
            merged.extend(reader)
    _write(root / "metrics.csv", _csv_text(header, merged))
    return root


# reports


def _read_metrics(path: Path):
    if path.is_dir():
        path = path / "metrics.csv"
    try:
        with path.open(newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            rows = list(reader)
    except OSError as exc:
        raise SchemaError(f"{path}: cannot read ({exc.strerror})") from None
    if header is None:
        raise SchemaError(f"{path}: empty metrics file")
    missing = [c for c in BASE_COLUMNS if c not in header]
    if missing:
        raise SchemaError(f"{path}: missing column(s) {', '.join(missing)}")
    if header[: len(BASE_COLUMNS)] != BASE_COLUMNS:
        raise SchemaError(f"{path}: columns out of order")
    extra = header[len(BASE_COLUMNS) :]
    if extra != [f"r_{i}" for i in range(1, len(extra) + 1)]:
        raise SchemaError(f"{path}: per-task columns must be r_1..r_T")
    for lineno, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise SchemaError(f"{path}:{lineno}: expected {len(header)} fields, found {len(row)}")
    return path, header, rows


def emit_report(run_dirs, out_dir) -> Path:
    """Mean and population standard deviation per (method, t) over seeds.

    Writes ``summary.csv`` (wide) and ``summary_long.csv``
    (``method,t,metric,mean,std,n``).
    """
    if not run_dirs:
        raise SchemaError("no runs to report")
    header = None
    groups: dict = {}
    for rd in run_dirs:
        path, h, rows = _read_metrics(Path(rd))
        if header is None:
            header = h
        elif h != header:
            raise SchemaError(f"{path}: columns {h} differ from the first run's {header}")
        for row in rows:
            key = (row[1], int(row[2]))
            groups.setdefault(key, []).append(row)
    metrics = header[3:]
    wide_header = ["method", "t", "n"] + [f"{m}_{s}" for m in metrics for s in ("mean", "std")]
    wide, long = [], []
    for (method, t), rows in sorted(groups.items(), key=lambda kv: (kv[0][0], kv[0][1])):
        out = [method, str(t), str(len(rows))]
        for j, m in enumerate(metrics, start=3):
            vals = np.array([float(r[j]) for r in rows if r[j] != ""])
            if len(vals):
                mean, std = float(vals.mean()), float(vals.std())
                out += [fmt(mean), fmt(std)]
                long.append([method, str(t), m, fmt(mean), fmt(std), str(len(vals))])
            else:
                out += ["", ""]
        wide.append(out)
    out_dir = Path(out_dir)
    _write(out_dir / "summary.csv", _csv_text(wide_header, wide))
    _write(out_dir / "summary_long.csv",
           _csv_text(["method", "t", "metric", "mean", "std", "n"], long))
    return out_dir / "summary.csv"
