"""Experiment configuration: a TOML document validated into plain dataclasses.

Schema (every key optional except ``[[regime]].kind``)::

    seed = 0                    # global seed, fans out to per-component seeds
    out = "runs"                # output directory

    [data]                      # development environment (env1)
    branching = 2
    depth = 4
    features = 16
    flip_prob = 0.15
    class_level = 4             # ancestor level naming the semantic class; depth = leaves
    transforms = 1
    transform_kind = "orthogonal-linear"
    seed = <derived>

    [novel]                     # optional second environment (env2); same keys
    shared_graphical = false    # novel items reuse the development transforms

    [network]
    hidden = [8]
    activation = "linear"
    sigma = 0.1
    seed = <derived>

    [teacher]                   # development phase of the A-LTM regimes
    tasks = [{head = "A", factor = "semantic"}]
    epochs = 500
    lr = 0.05
    batch_size = 0
    seed = <derived>

    [[regime]]
    kind = "sequential"         # or interleaved, multitask, altm-naive, altm-replay
    name = "sequential"
    init = "scratch"            # or "teacher" (forced for A-LTM kinds)
    old_tasks = [{head = "A", factor = "semantic"}]
    new_task = {head = "B", factor = "semantic"}
    phase_epochs = [500, 500]
    lr = [0.05, 0.05]
    batch_size = 0              # 0 = full batch
    interleave_period = 50
    old_weight = 1.0            # 0.1 for A-LTM kinds
    head_weights = {}           # per old head overrides of old_weight, e.g. {view = 0.5}
    new_weight = 1.0
    sigma = 0.1
    eval_every = 1
    replay_cap = 0              # 0 = keep all of env1
    old_targets = "teacher"
    seed = <derived>

    [report]
    recovery_factor = 1.1
    zoom = {regime = "sequential", start = 480, stop = 560}
    retention = {old_head = "A", new_head = "B"}

Derived seeds are ``derive_seed(seed, component) >> 1`` (kept below 2**63
so they fit a TOML integer) and are written into the resolved echo.
"""
from __future__ import annotations

import re
from dataclasses import asdict, dataclass, field

import tomli
import tomli_w

from .datagen import FACTORS, EnvConfig, HierarchyConfig
from .errors import AltmError, ConfigError
from .linalg import ACTIVATIONS, derive_seed
from .network import DEFAULT_SIGMA
from .regimes import DEFAULT_OLD_WEIGHT, KINDS, RegimeConfig, TaskSpec

TRANSFORM_KINDS = ("orthogonal-linear", "permutation")
INITS = ("scratch", "teacher")


def sub_seed(seed, name):
    return derive_seed(seed, name) >> 1


@dataclass
class DataConfig:
    branching: int = 2
    depth: int = 4
    features: int = 16
    flip_prob: float = 0.15
    class_level: int | None = None
    transforms: int = 1
    transform_kind: str = "orthogonal-linear"
    seed: int | None = None
    shared_graphical: bool = False

    def env_config(self):
        h = HierarchyConfig(self.branching, self.depth, self.features, self.flip_prob,
                            self.seed, self.class_level)
        return EnvConfig(h, self.transforms, self.transform_kind)


@dataclass
class NetworkConfig:
    hidden: list = field(default_factory=lambda: [8])
    activation: str = "linear"
    sigma: float = DEFAULT_SIGMA
    seed: int | None = None


@dataclass
class TeacherConfig:
    tasks: list = field(default_factory=list)
    epochs: int = 500
    lr: float = 0.05
    batch_size: int = 0
    seed: int | None = None


@dataclass
class RegimeEntry:
    regime: RegimeConfig
    init: str = "scratch"


@dataclass
class ReportConfig:
    recovery_factor: float = 1.1
    zoom: dict | None = None
    retention: dict | None = None


@dataclass
class ExperimentConfig:
    seed: int
    out: str
    data: DataConfig
    novel: DataConfig | None
    network: NetworkConfig
    teacher: TeacherConfig
    regimes: list
    report: ReportConfig

    @property
    def needs_teacher(self):
        return any(r.init == "teacher" for r in self.regimes)


class _Section:
    """Typed reads from one table, tracking which keys were consumed."""

    def __init__(self, table, where):
        if not isinstance(table, dict):
            raise ConfigError(f"{where} must be a table", key=where)
        self.t = dict(table)
        self.where = where

    def key(self, k):
        return f"{self.where}.{k}" if self.where else k

    def get(self, k, kind, default=None):
        if k not in self.t:
            return default
        v = self.t.pop(k)
        if kind is float and isinstance(v, int) and not isinstance(v, bool):
            v = float(v)
        if kind is int and isinstance(v, bool) or not isinstance(v, kind):
            name = kind.__name__ if isinstance(kind, type) else "/".join(t.__name__ for t in kind)
            raise ConfigError(f"{self.key(k)} must be of type {name}, got {v!r}", key=self.key(k))
        return v

    def done(self):
        if self.t:
            bad = sorted(self.t)[0]
            raise ConfigError(f"unknown key {self.key(bad)!r}", key=self.key(bad))


def _check(cond, key, msg):
    if not cond:
        raise ConfigError(f"{key}: {msg}", key=key)


def _task(v, key):
    if isinstance(v, str):
        v = {"head": v}
    s = _Section(v, key)
    head = s.get("head", str)
    _check(head, f"{key}.head", "task needs a head name")
    factor = s.get("factor", str, "semantic")
    _check(factor in FACTORS, f"{key}.factor", f"must be one of {FACTORS}")
    s.done()
    return TaskSpec(head, factor)


def _data(table, where, seed):
    s = _Section(table, where)
    d = DataConfig()
    for k in ("branching", "depth", "features", "transforms"):
        setattr(d, k, s.get(k, int, getattr(d, k)))
    d.flip_prob = s.get("flip_prob", float, d.flip_prob)
    d.class_level = s.get("class_level", int, d.depth)
    d.transform_kind = s.get("transform_kind", str, d.transform_kind)
    d.seed = s.get("seed", int, sub_seed(seed, f"{where}-hierarchy"))
    if where == "novel":
        d.shared_graphical = s.get("shared_graphical", bool, False)
    s.done()
    _check(d.branching >= 2, f"{where}.branching", "must be >= 2")
    _check(d.depth >= 1, f"{where}.depth", "must be >= 1")
    _check(d.features >= 1, f"{where}.features", "must be >= 1")
    _check(0 <= d.flip_prob <= 0.5, f"{where}.flip_prob", "must lie in [0, 0.5]")
    _check(0 <= d.class_level <= d.depth, f"{where}.class_level", "must lie in [0, depth]")
    _check(d.transforms >= 1, f"{where}.transforms", "must be >= 1")
    _check(d.transform_kind in TRANSFORM_KINDS, f"{where}.transform_kind",
           f"must be one of {TRANSFORM_KINDS}")
    _check(0 <= d.seed < 2 ** 63, f"{where}.seed", "must lie in [0, 2**63)")
    return d


def _floats(v, key):
    v = v if isinstance(v, list) else [v]
    _check(all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v), key,
           "must be a number or a list of numbers")
    return tuple(float(x) for x in v)


def _regime(table, i, seed):
    where = f"regime[{i}]"
    s = _Section(table, where)
    kind = s.get("kind", str)
    _check(kind in KINDS, f"{where}.kind", f"must be one of {KINDS}")
    name = s.get("name", str, kind)
    _check(re.fullmatch(r"[A-Za-z0-9_.-]+", name), f"{where}.name",
           "must be a non-empty file-safe name")
    altm = kind.startswith("altm")
    init = s.get("init", str, "teacher" if altm else "scratch")
    _check(init in INITS, f"{where}.init", f"must be one of {INITS}")
    _check(init == "teacher" or not altm, f"{where}.init", "A-LTM regimes start from the teacher")
    old = s.get("old_tasks", list, [{"head": "A", "factor": "semantic"}])
    old = tuple(_task(t, f"{where}.old_tasks[{j}]") for j, t in enumerate(old))
    new = _task(s.get("new_task", (dict, str), {"head": "B", "factor": "semantic"}), f"{where}.new_task")
    epochs = s.get("phase_epochs", (list, int), [0, 500] if altm else [500, 500])
    epochs = epochs if isinstance(epochs, list) else [epochs]
    _check(all(isinstance(e, int) and not isinstance(e, bool) and e >= 0 for e in epochs)
           and len(epochs) in (1, 2), f"{where}.phase_epochs", "must be one or two counts >= 0")
    if len(epochs) == 1:
        epochs = [0, epochs[0]] if altm else [epochs[0], 0]
    _check(sum(epochs) >= 1, f"{where}.phase_epochs", "epochs must total >= 1")
    _check(not (altm and epochs[0]), f"{where}.phase_epochs", "A-LTM regimes take [0, n]")
    lr = _floats(s.get("lr", (list, int, float), 0.05), f"{where}.lr")
    _check(len(lr) in (1, 2), f"{where}.lr", "one rate or one per phase")
    lr = lr * 2 if len(lr) == 1 else lr
    _check(min(lr) > 0, f"{where}.lr", "lr must be > 0")
    kw = dict(
        batch_size=s.get("batch_size", int, 0),
        interleave_period=s.get("interleave_period", int, 50),
        old_weight=s.get("old_weight", float, DEFAULT_OLD_WEIGHT[kind]),
        new_weight=s.get("new_weight", float, 1.0),
        sigma=s.get("sigma", float, DEFAULT_SIGMA),
        eval_every=s.get("eval_every", int, 1),
        replay_cap=s.get("replay_cap", int, 0),
        old_targets=s.get("old_targets", str, "teacher"),
        head_weights=s.get("head_weights", dict, {}),
        seed=s.get("seed", int, sub_seed(seed, f"regime:{name}")),
    )
    s.done()
    _check(kw["interleave_period"] >= 1, f"{where}.interleave_period", "must be >= 1")
    _check(kw["batch_size"] >= 0, f"{where}.batch_size", "must be >= 0 (0 = full batch)")
    _check(kw["eval_every"] >= 1, f"{where}.eval_every", "must be >= 1")
    _check(kw["replay_cap"] >= 0, f"{where}.replay_cap", "must be >= 0")
    _check(kw["old_weight"] >= 0, f"{where}.old_weight", "must be >= 0")
    _check(kw["new_weight"] >= 0, f"{where}.new_weight", "must be >= 0")
    old_heads = {t.head for t in old}
    for h, w in kw["head_weights"].items():
        _check(h in old_heads, f"{where}.head_weights.{h}", "must name an old-task head")
        _check(isinstance(w, (int, float)) and not isinstance(w, bool) and w >= 0,
               f"{where}.head_weights.{h}", "must be a number >= 0")
    _check(kw["sigma"] > 0, f"{where}.sigma", "must be > 0")
    _check(kw["old_targets"] in ("teacher", "labels"), f"{where}.old_targets",
           "must be 'teacher' or 'labels'")
    _check(0 <= kw["seed"] < 2 ** 63, f"{where}.seed", "must lie in [0, 2**63)")
    heads = [t.head for t in old] + [new.head]
    _check(len(set(heads)) == len(heads), f"{where}", f"duplicate head id in {heads}")
    try:
        cfg = RegimeConfig(kind, old, new, tuple(epochs), lr, name=name, **kw)
    except AltmError as exc:
        raise ConfigError(f"{where}: {exc}", key=where) from exc
    return RegimeEntry(cfg, init)


def parse_config(source, *, is_text=None, seed=None):
    """Validate a config given as a path or as TOML text.

    Text is recognised by a newline or an ``=``; pass ``is_text`` to force.
    ``seed`` replaces the document's global seed before any sub-seed is
    derived; explicitly written sub-seeds are kept.
    """
    text = source
    if is_text is None:
        is_text = "\n" in str(source) or "=" in str(source)
    if not is_text:
        with open(source, "rb") as fh:
            raw = fh.read()
        try:
            text = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ConfigError(f"config is not UTF-8: {exc}") from exc
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"config syntax error: {exc}") from exc
    if seed is not None:
        doc["seed"] = seed
    return from_document(doc)


def from_document(doc):
    top = _Section(doc, "")
    seed = top.get("seed", int, 0)
    _check(0 <= seed < 2 ** 63, "seed", "must lie in [0, 2**63)")
    out = top.get("out", str, "runs")
    data = _data(top.get("data", dict, {}), "data", seed)
    novel = top.get("novel", dict)
    novel = _data(novel, "novel", seed) if novel is not None else None
    if novel is not None:
        _check(novel.features == data.features, "novel.features", "must equal data.features")

    s = _Section(top.get("network", dict, {}), "network")
    net = NetworkConfig()
    net.hidden = s.get("hidden", list, net.hidden)
    net.activation = s.get("activation", str, net.activation)
    net.sigma = s.get("sigma", float, net.sigma)
    net.seed = s.get("seed", int, sub_seed(seed, "network-init"))
    s.done()
    _check(all(isinstance(h, int) and not isinstance(h, bool) and h >= 1 for h in net.hidden),
           "network.hidden", "widths must be integers >= 1")
    _check(net.activation in ACTIVATIONS, "network.activation", f"must be one of {ACTIVATIONS}")
    _check(net.sigma > 0, "network.sigma", "must be > 0")

    regimes = top.get("regime", list)
    _check(regimes, "regime", "at least one [[regime]] table is required")
    regimes = [_regime(r, i, seed) for i, r in enumerate(regimes)]
    names = [r.regime.name for r in regimes]
    dup = sorted({n for n in names if names.count(n) > 1})
    _check(not dup, "regime", f"duplicate regime names {dup}")

    s = _Section(top.get("teacher", dict, {}), "teacher")
    teacher = TeacherConfig()
    default_tasks = []
    for r in regimes:
        if r.init == "teacher":
            for t in r.regime.old_tasks:
                if t not in default_tasks:
                    default_tasks.append(t)
    tasks = s.get("tasks", list)
    teacher.tasks = default_tasks if tasks is None else \
        [_task(t, f"teacher.tasks[{j}]") for j, t in enumerate(tasks)]
    teacher.epochs = s.get("epochs", int, teacher.epochs)
    teacher.lr = s.get("lr", float, teacher.lr)
    teacher.batch_size = s.get("batch_size", int, teacher.batch_size)
    teacher.seed = s.get("seed", int, sub_seed(seed, "teacher"))
    s.done()
    _check(teacher.epochs >= 0, "teacher.epochs", "must be >= 0")
    _check(teacher.lr > 0, "teacher.lr", "must be > 0")
    _check(teacher.batch_size >= 0, "teacher.batch_size", "must be >= 0")
    th = [t.head for t in teacher.tasks]
    _check(len(set(th)) == len(th), "teacher.tasks", f"duplicate head id in {th}")
    for r in regimes:
        if r.init == "teacher":
            missing = [t.head for t in r.regime.old_tasks if t not in teacher.tasks]
            _check(not missing, "teacher.tasks", f"regime {r.regime.name!r} needs teacher heads {missing}")

    s = _Section(top.get("report", dict, {}), "report")
    rep = ReportConfig()
    rep.recovery_factor = s.get("recovery_factor", float, rep.recovery_factor)
    zoom = s.get("zoom", dict)
    if zoom is not None:
        z = _Section(zoom, "report.zoom")
        rep.zoom = {"regime": z.get("regime", str), "start": z.get("start", int),
                    "stop": z.get("stop", int)}
        z.done()
        _check(rep.zoom["regime"] in names, "report.zoom.regime", f"must name a regime in {names}")
        _check(rep.zoom["start"] is not None and rep.zoom["stop"] is not None
               and 0 <= rep.zoom["start"] < rep.zoom["stop"], "report.zoom", "needs 0 <= start < stop")
    retention = s.get("retention", dict)
    if retention is not None:
        z = _Section(retention, "report.retention")
        rep.retention = {"old_head": z.get("old_head", str), "new_head": z.get("new_head", str)}
        z.done()
        for k, h in rep.retention.items():
            _check(h and all(h in r.regime.heads for r in regimes), f"report.retention.{k}",
                   "must name a head present in every regime")
    s.done()
    _check(rep.recovery_factor >= 1, "report.recovery_factor", "must be >= 1")
    top.done()
    return ExperimentConfig(seed, out, data, novel, net, teacher, regimes, rep)


def _task_doc(t):
    return {"head": t.head, "factor": t.factor}


def to_document(cfg: ExperimentConfig):
    """Fully materialised TOML-ready dict; parsing it back gives ``cfg``."""
    def data_doc(d, novel):
        doc = {k: v for k, v in asdict(d).items() if k != "shared_graphical"}
        if novel:
            doc["shared_graphical"] = d.shared_graphical
        return doc

    doc = {"seed": cfg.seed, "out": cfg.out, "data": data_doc(cfg.data, False)}
    if cfg.novel is not None:
        doc["novel"] = data_doc(cfg.novel, True)
    doc["network"] = asdict(cfg.network)
    doc["teacher"] = {"tasks": [_task_doc(t) for t in cfg.teacher.tasks], "epochs": cfg.teacher.epochs,
                      "lr": cfg.teacher.lr, "batch_size": cfg.teacher.batch_size,
                      "seed": cfg.teacher.seed}
    doc["regime"] = []
    for e in cfg.regimes:
        r = e.regime
        doc["regime"].append({
            "kind": r.kind, "name": r.name, "init": e.init,
            "old_tasks": [_task_doc(t) for t in r.old_tasks], "new_task": _task_doc(r.new_task),
            "phase_epochs": list(r.phase_epochs), "lr": list(r.lr), "batch_size": r.batch_size,
            "interleave_period": r.interleave_period, "old_weight": r.old_weight,
            "head_weights": dict(r.head_weights),
            "new_weight": r.new_weight, "sigma": r.sigma, "eval_every": r.eval_every,
            "replay_cap": r.replay_cap, "old_targets": r.old_targets, "seed": r.seed,
        })
    rep = {"recovery_factor": cfg.report.recovery_factor}
    if cfg.report.zoom:
        rep["zoom"] = dict(cfg.report.zoom)
    if cfg.report.retention:
        rep["retention"] = dict(cfg.report.retention)
    doc["report"] = rep
    return doc


def dump_config(cfg: ExperimentConfig):
    return tomli_w.dumps(to_document(cfg))

