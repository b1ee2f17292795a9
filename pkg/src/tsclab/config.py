"""Run configuration: a flat ``section.key = value`` file plus overrides.

Every key has a default; unknown keys are rejected.  The resolved mapping
(defaults merged with file and command-line values) is what the run
manifest echoes, so nothing that shaped a run is left implicit.
"""

from __future__ import annotations

from dataclasses import MISSING, fields
from pathlib import Path

from .baselines.methods import METHODS, MethodConfig
from .consolidation import TscConfig
from .errors import ConfigError, ParseError
from .evalkit import ProbeConfig
from .nn import NetworkSpec
from .taskgen import StreamConfig
from .training import OptimConfig


def _defaults_of(cls, skip=()):
    out = {}
    for f in fields(cls):
        if f.name in skip or f.default is MISSING:
            continue
        out[f.name] = f.default
    return out


def _build_defaults() -> dict:
    d = {
        "net.hidden": "64,64",
        "net.activation": "relu",
        "pretrain.epochs": 60,
        "pretrain.shots": 20,
        "pretrain.batch_size": 50,
        "pretrain.lr": 0.001,
        "pretrain.data": "",
        "run.seeds": "0-9",
        "run.out": "runs",
        "run.name": "",
        "run.label": "",
        "run.fisher": True,
        "run.confusion": True,
        "run.timing": False,
        "run.checkpoints": True,
        "run.workers": 1,
        "probe.enabled": True,
        "probe.seed": 0,
    }
    for k, v in _defaults_of(StreamConfig, skip=("seed",)).items():
        d["stream." + k] = v
    for k, v in _defaults_of(TscConfig).items():
        d["tsc." + k] = v
    for k, v in _defaults_of(MethodConfig).items():
        d["method." + ("name" if k == "method" else k)] = v
    for k, v in _defaults_of(OptimConfig).items():
        d["optim." + k] = v
    for k, v in _defaults_of(ProbeConfig).items():
        d["probe." + k] = v
    return d


DEFAULTS = _build_defaults()


def _coerce(key: str, raw, default):
    if not isinstance(raw, str):
        raw_s = str(raw)
    else:
        raw_s = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw_s.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw_s)
        if isinstance(default, int):
            return int(raw_s)
        if isinstance(default, float):
            return float(raw_s)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw_s!r} as {type(default).__name__}") from None
    if len(raw_s) >= 2 and raw_s[0] == raw_s[-1] and raw_s[0] in "'\"":
        raw_s = raw_s[1:-1]
    return raw_s


def parse_seeds(text: str) -> list:
    """``"0-9"``, ``"3"`` or ``"0,2,5-7"`` to a sorted list of ints."""
    seeds = set()
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        try:
            if "-" in part:
                lo, hi = part.split("-", 1)
                seeds.update(range(int(lo), int(hi) + 1))
            else:
                seeds.add(int(part))
        except ValueError:
            raise ConfigError(f"run.seeds: bad entry {part!r}") from None
    if not seeds:
        raise ConfigError("run.seeds selects no seeds")
    return sorted(seeds)


class RunConfig:
    """Resolved configuration; read values with ``cfg["tsc.beta"]``."""

    def __init__(self, values: dict | None = None):
        self.values = dict(DEFAULTS)
        if values:
            self.update(values)

    def update(self, values: dict) -> "RunConfig":
        for key, raw in values.items():
            key = key.strip()
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            self.values[key] = _coerce(key, raw, DEFAULTS[key])
        self.validate()
        return self

    def __getitem__(self, key: str):
        return self.values[key]

    def replace(self, **dotted) -> "RunConfig":
        new = RunConfig(self.values)
        return new.update({k.replace("__", "."): v for k, v in dotted.items()})

    def to_dict(self) -> dict:
        return dict(sorted(self.values.items()))

    def validate(self) -> None:
        if self.values["method.name"] not in METHODS:
            raise ConfigError(f"method.name must be one of {METHODS}")
        if self.values["stream.mode"] not in ("new_class", "new_instance"):
            raise ConfigError("stream.mode must be new_class or new_instance")
        for key in ("pretrain.epochs", "pretrain.shots", "run.workers"):
            if self.values[key] < 0:
                raise ConfigError(f"{key} must be >= 0")
        self.hidden()
        self.seeds()
        try:
            self.tsc()
            self.method()
            self.stream(0)
        except (ValueError, TypeError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from None

    # typed views

    @property
    def method_name(self) -> str:
        return self.values["method.name"]

    @property
    def label(self) -> str:
        return self.values["run.label"] or self.method_name

    def seeds(self) -> list:
        return parse_seeds(self.values["run.seeds"])

    def hidden(self) -> tuple:
        act = self.values["net.activation"]
        try:
            widths = [int(w) for w in str(self.values["net.hidden"]).split(",") if w.strip()]
        except ValueError:
            raise ConfigError("net.hidden must be comma-separated widths") from None
        if not widths or min(widths) < 1:
            raise ConfigError("net.hidden needs at least one positive width")
        return tuple((w, act) for w in widths)

    def network(self, seed: int, input_dim: int, classes: int = 0) -> NetworkSpec:
        from .seeding import derive_seed

        return NetworkSpec(input_dim, self.hidden(), classes, derive_seed(seed, "net"))

    def optim(self) -> OptimConfig:
        v = self.values
        return OptimConfig(v["optim.lr"], v["optim.beta1"], v["optim.beta2"],
                           v["optim.epsilon"])

    def stream(self, seed: int) -> StreamConfig:
        kw = {f.name: self.values["stream." + f.name] for f in fields(StreamConfig)
              if f.name != "seed"}
        return StreamConfig(seed=seed, **kw)

    def tsc(self) -> TscConfig:
        kw = {f.name: self.values["tsc." + f.name] for f in fields(TscConfig)
              if f.name != "optim"}
        return TscConfig(optim=self.optim(), **kw)

    def method(self) -> MethodConfig:
        kw = {f.name: self.values["method." + ("name" if f.name == "method" else f.name)]
              for f in fields(MethodConfig) if f.name != "optim"}
        return MethodConfig(optim=self.optim(), **kw)

    def probe(self) -> ProbeConfig:
        v = self.values
        return ProbeConfig(v["probe.epochs"], v["probe.batch_size"], v["probe.full_finetune"],
                           self.optim())


def parse_config_text(text: str, source="<string>") -> dict:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(source, lineno, f"expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in DEFAULTS:
            raise ParseError(source, lineno, f"unknown config key {key!r}")
        if key in out:
            raise ParseError(source, lineno, f"duplicate key {key!r}")
        out[key] = value
    return out


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    values = {}
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        values = parse_config_text(text, path)
    cfg = RunConfig()
    cfg.update(values)
    if overrides:
        cfg.update(overrides)
    return cfg


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for key, value in cfg.to_dict().items():
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
