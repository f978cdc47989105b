"""Run configuration: INI-style sections of flat ``key = value`` pairs.

Grammar::

    [data]     edges, features, labels, clusters, name, synthetic, symmetrize
    [model]    hidden, kinds, activations, decoder, acc, keep_prob, weight_decay,
               reg_layers, normalization, self_loops, bias, mean_degree
    [train]    strategy, gamma, batch_fraction, steps, optimizer, lr, update_mode,
               concurrency, fanout, cluster_restrict, patience, eval_every, contiguous
    [run]      seed, deterministic, partitions, workers, out

Lists are comma separated; an empty value means "unset"; ``;`` starts an
inline comment.  The only
environment override is ``GT_SEED``, which replaces ``run.seed``.
"""

from __future__ import annotations

import configparser
import io
import os
import typing
from dataclasses import dataclass, field, fields, replace

from .models import ModelSpec
from .trainer import TrainingConfig

SEED_ENV = "GT_SEED"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    edges: str = ""
    features: str = ""
    labels: str = ""
    clusters: str = ""
    name: str = ""
    synthetic: str = ""
    symmetrize: bool = True


@dataclass(frozen=True)
class ModelConfig:
    hidden: tuple = (16,)
    kinds: tuple = ()
    activations: tuple = ()
    decoder: str = "none"
    acc: str = "sum"
    keep_prob: float = 0.5
    weight_decay: float = 5e-4
    reg_layers: tuple = (1,)
    normalization: str = "renormalized"
    self_loops: bool = True
    bias: bool = False
    mean_degree: str = "view"

    def spec(self, d_in: int, num_classes: int, edge_dim: int = 0) -> ModelSpec:
        hidden = tuple(int(h) for h in self.hidden)
        dims = (d_in,) + hidden + ((num_classes,) if self.decoder == "none" else ())
        return ModelSpec(dims, tuple(self.kinds), tuple(self.activations), num_classes, self.decoder, self.acc,
                         self.keep_prob, self.weight_decay, tuple(int(r) for r in self.reg_layers),
                         self.normalization, self.self_loops, edge_dim if "gat_edge" in self.kinds else 0,
                         self.bias, self.mean_degree)


@dataclass(frozen=True)
class TrainSection:
    strategy: str = "global"
    gamma: int = 1
    batch_fraction: float = 0.01
    steps: int = 200
    optimizer: str = "adam"
    lr: float = 0.01
    update_mode: str = "sync"
    concurrency: int = 2
    fanout: typing.Optional[tuple] = None
    cluster_restrict: bool = False
    patience: typing.Optional[int] = 50
    eval_every: int = 1
    contiguous: bool = False


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    deterministic: bool = False
    partitions: int = 1
    workers: int = 1
    out: str = "run"


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainSection = field(default_factory=TrainSection)
    run: RunSection = field(default_factory=RunSection)

    def training_config(self) -> TrainingConfig:
        t, r = self.train, self.run
        return TrainingConfig(t.strategy, r.partitions, t.gamma, t.batch_fraction, t.steps, t.optimizer, t.lr,
                              t.update_mode, t.concurrency, t.fanout, t.cluster_restrict, r.seed,
                              r.deterministic, r.workers, t.eval_every, t.patience, t.contiguous)

    def with_overrides(self, **run_kw) -> "RunConfig":
        kw = {k: v for k, v in run_kw.items() if v is not None}
        return replace(self, run=replace(self.run, **kw)) if kw else self


SECTIONS = {"data": DataConfig, "model": ModelConfig, "train": TrainSection, "run": RunSection}


def _format(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(text: str, hint, default):
    origin = typing.get_origin(hint)
    if origin is typing.Union:
        if text.strip() == "":
            return None
        hint = next(a for a in typing.get_args(hint) if a is not type(None))
        if default is None:
            default = () if hint is tuple else None
    text = text.strip()
    if hint is bool:
        low = text.lower()
        if low in ("true", "yes", "on", "1"):
            return True
        if low in ("false", "no", "off", "0"):
            return False
        raise ConfigError(f"not a boolean: {text!r}")
    if hint is int:
        return int(text)
    if hint is float:
        return float(text)
    if hint is tuple:
        if text == "":
            return ()
        items = [t.strip() for t in text.split(",")]
        sample = default[0] if default else None
        if isinstance(sample, int) or all(i.lstrip("-").isdigit() for i in items):
            return tuple(int(i) for i in items)
        return tuple(items)
    return text


def serialize(cfg: RunConfig) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    for name in SECTIONS:
        section = getattr(cfg, name)
        cp[name] = {f.name: _format(getattr(section, f.name)) for f in fields(section)}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def parse(text: str, env: typing.Mapping[str, str] | None = None) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";",))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    parts = {}
    for name, cls in SECTIONS.items():
        hints = typing.get_type_hints(cls)
        kw = {}
        if cp.has_section(name):
            known = {f.name: f for f in fields(cls)}
            for key, raw in cp[name].items():
                if key not in known:
                    raise ConfigError(f"unknown key {name}.{key}")
                f = known[key]
                default = f.default if f.default is not field else None
                try:
                    kw[key] = _parse(raw, hints[key], default)
                except ValueError as exc:
                    raise ConfigError(f"{name}.{key}: {exc}") from None
        parts[name] = cls(**kw)
    for name in cp.sections():
        if name not in SECTIONS:
            raise ConfigError(f"unknown section [{name}]")
    cfg = RunConfig(**parts)
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            cfg = cfg.with_overrides(seed=int(env[SEED_ENV]))
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer") from None
    return cfg


def load(path, env=None) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            return parse(fh.read(), env)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
