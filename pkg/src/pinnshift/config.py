"""Experiment configuration files.

A config is a TOML document with these tables (every key is optional
unless noted)::

    [pde]            kind (required), params = {name = value, ...}
    [domain]         x_min, x_max, t_train, t_max
    [architecture]   hidden = [50, 50, 50, 50], activation, skip,
                     embedding = {sigmas = [...], features_per_sigma, frequency_matrix_seed}
    [training]       alpha, beta, lr, epochs, seed, samples = [N_f, N_b, N_i],
                     log_every, checkpoint_every, optimizer
    [training.dpm]   epsilon, delta, w            (presence switches DPM on)
    [spectral]       n_x, n_t, normalize, clip
    [sweep]          param, values = [...]  or  start, stop, count
    [transfer]       family = [{...}, ...], target = {...}, seeds = [...],
                     arms = ["baseline", "half", "full"], pretrain_epochs
    [dpm]            seeds = [...], w
    [predict]        param, start, stop, count, test_regions, hidden, epochs, lr, split_seed
    [output]         dir

Everything is validated before any computation starts. Validation errors
name the offending key and, when it can be found, its line in the file.
"""

from __future__ import annotations

import re
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError
from .neural import ACTIVATIONS, FourierFeatureConfig
from .pdes import Domain, default_domain, make_problem
from .training import Architecture, DpmConfig, TrainConfig

SCHEMA = {
    "pde": {"kind", "params"},
    "domain": {"x_min", "x_max", "t_train", "t_max"},
    "architecture": {"hidden", "activation", "skip", "embedding"},
    "training": {"alpha", "beta", "lr", "epochs", "seed", "samples", "log_every",
                 "checkpoint_every", "optimizer", "dpm"},
    "spectral": {"n_x", "n_t", "normalize", "clip"},
    "sweep": {"param", "values", "start", "stop", "count", "base"},
    "transfer": {"family", "target", "seeds", "arms", "pretrain_epochs"},
    "dpm": {"seeds", "w"},
    "predict": {"param", "start", "stop", "count", "test_regions", "hidden", "epochs", "lr",
                "split_seed"},
    "output": {"dir"},
}
NESTED = {("training", "dpm"): {"epsilon", "delta", "w"},
          ("architecture", "embedding"): {"sigmas", "features_per_sigma", "frequency_matrix_seed"}}
ARMS = ("baseline", "half", "full")


@dataclass(frozen=True)
class SpectralSettings:
    n_x: int = 256
    n_t: int = 100
    normalize: bool = True
    clip: bool = False


@dataclass(frozen=True)
class SweepSettings:
    param: str
    values: tuple
    base: dict = field(default_factory=dict)


@dataclass(frozen=True)
class TransferSettings:
    family: tuple
    target: dict
    seeds: tuple = (0,)
    arms: tuple = ARMS
    pretrain_epochs: int | None = None


@dataclass(frozen=True)
class DpmSettings:
    seeds: tuple = (0,)
    w: float = 1.001


@dataclass(frozen=True)
class PredictSettings:
    param: str
    values: tuple
    test_regions: int = 5
    hidden: tuple = (64, 64, 64, 64)
    epochs: int = 20000
    lr: float = 1e-3
    split_seed: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    params: dict
    domain: Domain | None
    architecture: Architecture
    training: TrainConfig
    spectral: SpectralSettings = SpectralSettings()
    sweep: SweepSettings | None = None
    transfer: TransferSettings | None = None
    dpm: DpmSettings | None = None
    predict: PredictSettings | None = None
    output_dir: str | None = None
    raw: dict = field(default_factory=dict, compare=False)

    def problem(self, **overrides):
        return make_problem(self.kind, {**self.params, **overrides}, self.domain)

    def with_seed(self, seed):
        return _replace(self, training=self.training.replace(seed=int(seed)))


def _replace(cfg, **changes):
    values = {f: getattr(cfg, f) for f in cfg.__dataclass_fields__}
    values.update(changes)
    return ExperimentConfig(**values)


class _Locator:
    """Maps (table, key) to a 1-based line number in the source text."""

    def __init__(self, text, source):
        self.lines = text.splitlines()
        self.source = source

    def line(self, table, key=None):
        current = None
        header = re.compile(r"^\s*\[+\s*([A-Za-z0-9_.\-]+)\s*\]+")
        for i, raw in enumerate(self.lines, 1):
            m = header.match(raw)
            if m:
                current = m.group(1)
                if key is None and current == table:
                    return i
                continue
            if key is not None and current == table and re.match(rf"^\s*{re.escape(key)}\s*=", raw):
                return i
        return None

    def error(self, table, key, message):
        line = self.line(table, key)
        where = f"{self.source}:{line}: " if line else f"{self.source}: "
        name = f"{table}.{key}" if key else table
        return ConfigError(f"{where}{name}: {message}")


def _number(loc, table, key, value, kind=float, positive=False, nonneg=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise loc.error(table, key, f"expected a number, got {value!r}")
    if kind is int and value != int(value):
        raise loc.error(table, key, f"expected an integer, got {value!r}")
    value = kind(value)
    if not np.isfinite(value):
        raise loc.error(table, key, "must be finite")
    if positive and not value > 0:
        raise loc.error(table, key, f"must be positive, got {value}")
    if nonneg and value < 0:
        raise loc.error(table, key, f"must be non-negative, got {value}")
    return value


def _check_keys(loc, doc):
    for table, body in doc.items():
        if table not in SCHEMA:
            raise loc.error(table, None, f"unknown section; expected one of {sorted(SCHEMA)}")
        if not isinstance(body, dict):
            raise loc.error(table, None, "must be a table")
        for key, value in body.items():
            if key not in SCHEMA[table]:
                raise loc.error(table, key, f"unknown key; expected one of {sorted(SCHEMA[table])}")
            allowed = NESTED.get((table, key))
            if allowed is not None:
                if not isinstance(value, dict):
                    raise loc.error(table, key, "must be a table")
                extra = sorted(set(value) - allowed)
                if extra:
                    raise loc.error(f"{table}.{key}", extra[0], f"unknown key; expected one of {sorted(allowed)}")


def _grid_values(loc, table, body):
    if "values" in body:
        if any(k in body for k in ("start", "stop", "count")):
            raise loc.error(table, "values", "give either values or start/stop/count, not both")
        values = tuple(_number(loc, table, "values", v) for v in body["values"])
    else:
        missing = [k for k in ("start", "stop", "count") if k not in body]
        if missing:
            raise loc.error(table, None, f"missing {', '.join(missing)}")
        count = _number(loc, table, "count", body["count"], int, positive=True)
        values = tuple(float(v) for v in np.linspace(_number(loc, table, "start", body["start"]),
                                                      _number(loc, table, "stop", body["stop"]), count))
    if len(values) < 1 or np.any(np.diff(values) <= 0):
        raise loc.error(table, "values", "must be a non-empty strictly increasing list")
    return values


def _validated_params(loc, table, key, kind, params, domain):
    try:
        make_problem(kind, params, domain)
    except ConfigError as exc:
        raise loc.error(table, key, str(exc)) from None
    return dict(params)


def parse(text, source="<config>"):
    """Validate a TOML document and build an :class:`ExperimentConfig`."""
    loc = _Locator(text, source)
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    _check_keys(loc, doc)
    pde = doc.get("pde")
    if not pde or "kind" not in pde:
        raise loc.error("pde", "kind", "required")
    kind = pde["kind"]
    params = pde.get("params", {})
    if not isinstance(params, dict):
        raise loc.error("pde", "params", "must be a table of name = value")

    domain = None
    if "domain" in doc:
        try:
            base = default_domain(kind)
        except ConfigError as exc:
            raise loc.error("pde", "kind", str(exc)) from None
        d = {k: _number(loc, "domain", k, v) for k, v in doc["domain"].items()}
        try:
            domain = Domain(d.get("x_min", base.x_min), d.get("x_max", base.x_max),
                            d.get("t_train", base.t_train), d.get("t_max", base.t_max),
                            base.spatial_dim)
        except ConfigError as exc:
            raise loc.error("domain", None, str(exc)) from None
    params = _validated_params(loc, "pde", "params" if params else "kind", kind, params, domain)

    a = doc.get("architecture", {})
    hidden = tuple(_number(loc, "architecture", "hidden", h, int, positive=True)
                   for h in a.get("hidden", (50, 50, 50, 50)))
    activation = a.get("activation", "tanh")
    if activation not in ACTIVATIONS:
        raise loc.error("architecture", "activation", f"unknown activation {activation!r}")
    embedding = None
    if "embedding" in a:
        try:
            embedding = FourierFeatureConfig(**a["embedding"])
        except (ConfigError, TypeError) as exc:
            raise loc.error("architecture", "embedding", str(exc)) from None
    arch = Architecture(hidden, activation, embedding, bool(a.get("skip", False)))

    t = dict(doc.get("training", {}))
    dpm_cfg = None
    if "dpm" in t:
        d = t.pop("dpm")
        try:
            dpm_cfg = DpmConfig(**{k: _number(loc, "training.dpm", k, v) for k, v in d.items()})
        except ConfigError as exc:
            raise loc.error("training.dpm", None, str(exc)) from None
    checks = {"alpha": dict(nonneg=True), "beta": dict(nonneg=True), "lr": dict(positive=True),
              "epochs": dict(kind=int, positive=True), "seed": dict(kind=int, nonneg=True),
              "log_every": dict(kind=int, positive=True),
              "checkpoint_every": dict(kind=int, nonneg=True)}
    values = {k: _number(loc, "training", k, t[k], **checks[k]) for k in checks if k in t}
    if "samples" in t:
        s = t["samples"]
        if not isinstance(s, list) or len(s) != 3:
            raise loc.error("training", "samples", "expected [domain, boundary, initial]")
        values["samples"] = tuple(_number(loc, "training", "samples", n, int, nonneg=True) for n in s)
    if "optimizer" in t:
        values["optimizer"] = t["optimizer"]
    try:
        training = TrainConfig(dpm=dpm_cfg, **values)
    except ConfigError as exc:
        raise loc.error("training", None, str(exc)) from None

    s = doc.get("spectral", {})
    spectral = SpectralSettings(
        _number(loc, "spectral", "n_x", s.get("n_x", 256), int, positive=True),
        _number(loc, "spectral", "n_t", s.get("n_t", 100), int, positive=True),
        bool(s.get("normalize", True)), bool(s.get("clip", False)))
    if spectral.n_x < 4:
        raise loc.error("spectral", "n_x", "need at least 4 spatial points")

    sweep = None
    if "sweep" in doc:
        body = doc["sweep"]
        if "param" not in body:
            raise loc.error("sweep", "param", "required")
        base = dict(body.get("base", {}))
        values = _grid_values(loc, "sweep", body)
        for v in values:
            _validated_params(loc, "sweep", "param", kind, {**params, **base, body["param"]: v}, domain)
        sweep = SweepSettings(body["param"], values, base)

    transfer = None
    if "transfer" in doc:
        body = doc["transfer"]
        for key in ("family", "target"):
            if key not in body:
                raise loc.error("transfer", key, "required")
        family = tuple(_validated_params(loc, "transfer", "family", kind, m, domain)
                       for m in body["family"])
        if not family:
            raise loc.error("transfer", "family", "must list at least one member")
        target = _validated_params(loc, "transfer", "target", kind, body["target"], domain)
        seeds = tuple(_number(loc, "transfer", "seeds", v, int, nonneg=True)
                      for v in body.get("seeds", [0]))
        arms = tuple(body.get("arms", ARMS))
        bad = [x for x in arms if x not in ARMS]
        if bad or not arms:
            raise loc.error("transfer", "arms", f"arms must be drawn from {list(ARMS)}")
        pre = body.get("pretrain_epochs")
        if pre is not None:
            pre = _number(loc, "transfer", "pretrain_epochs", pre, int, positive=True)
        transfer = TransferSettings(family, target, seeds, arms, pre)

    dpm = None
    if "dpm" in doc:
        body = doc["dpm"]
        seeds = tuple(_number(loc, "dpm", "seeds", v, int, nonneg=True) for v in body.get("seeds", [0]))
        w = _number(loc, "dpm", "w", body.get("w", 1.001))
        if w < 1:
            raise loc.error("dpm", "w", f"must be >= 1, got {w}")
        dpm = DpmSettings(seeds, w)

    predict = None
    if "predict" in doc:
        body = doc["predict"]
        if "param" not in body:
            raise loc.error("predict", "param", "required")
        predict = PredictSettings(
            body["param"], _grid_values(loc, "predict", body),
            _number(loc, "predict", "test_regions", body.get("test_regions", 5), int, positive=True),
            tuple(_number(loc, "predict", "hidden", h, int, positive=True)
                  for h in body.get("hidden", (64, 64, 64, 64))),
            _number(loc, "predict", "epochs", body.get("epochs", 20000), int, positive=True),
            _number(loc, "predict", "lr", body.get("lr", 1e-3), positive=True),
            _number(loc, "predict", "split_seed", body.get("split_seed", 0), int, nonneg=True))

    out = doc.get("output", {}).get("dir")
    return ExperimentConfig(kind, params, domain, arch, training, spectral, sweep, transfer, dpm,
                            predict, out, doc)


def load(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse(text, str(path))
