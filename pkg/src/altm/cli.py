"""Command line entry point.

    altm run <config.toml> [--out DIR] [--seed N] [--load-teacher FILE] [--jobs N]

Writes into the output directory:

* ``config.resolved.toml``  every setting, defaults and derived seeds included
* ``teacher.json``          the development-phase network (A-LTM or teacher-initialised runs)
* ``<regime>.csv``          one curve file per regime
* ``zoom.csv``              optional epoch window of one regime
* ``retention.csv``         optional final-accuracy table
* ``run.log``               progress with timestamps (the only non-deterministic file)
* ``DONE``                  written last; its absence flags partial output

Exit codes: 0 success, 1 config error, 2 runtime or numerical error, 3 I/O error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import network as nw
from . import report
from .config import ExperimentConfig, dump_config, parse_config
from .datagen import TransitionSpec, make_environment, make_transition
from .errors import AltmError, ConfigError, UsageError
from .linalg import make_rng
from .regimes import run_regime, train_teacher

log = logging.getLogger("altm")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_IO = 0, 1, 2, 3


def build_transition(cfg: ExperimentConfig) -> TransitionSpec:
    dev = cfg.data.env_config()
    if cfg.novel is None:
        env1 = make_environment(dev, name="env1")
        return TransitionSpec(env1, make_environment(dev, name="env2"))
    return make_transition(dev, cfg.novel.env_config(), cfg.novel.shared_graphical)


def initial_network(cfg: ExperimentConfig, env, tasks, seed):
    heads = {t.head: env.num_classes(t.factor) for t in tasks}
    n = cfg.network
    return nw.Network.build(env.dim, list(n.hidden), heads, n.activation, n.sigma, make_rng(seed))


def develop_teacher(cfg: ExperimentConfig, transition):
    t = cfg.teacher
    if not t.tasks:
        raise UsageError("no teacher tasks configured")
    net = initial_network(cfg, transition.env1, t.tasks, t.seed)
    net = train_teacher(net, transition.env1, t.tasks, t.epochs, t.lr, t.batch_size, t.seed)
    return nw.snapshot_teacher(net)


def check_teacher(cfg: ExperimentConfig, teacher, env):
    for task in cfg.teacher.tasks:
        if task.head not in teacher.head_ids:
            raise UsageError(f"loaded teacher lacks head {task.head!r}")
        if teacher.head_dim(task.head) != env.num_classes(task.factor):
            raise UsageError(f"loaded teacher head {task.head!r} has {teacher.head_dim(task.head)} "
                             f"outputs, task needs {env.num_classes(task.factor)}")
    if teacher.input_dim != env.dim:
        raise UsageError(f"loaded teacher expects inputs of dim {teacher.input_dim}, env has {env.dim}")


def _run_one(args):
    cfg, entry, transition, teacher = args
    if entry.init == "teacher":
        net = teacher.network()
    else:
        net = initial_network(cfg, transition.env1, entry.regime.old_tasks, cfg.network.seed)
    return run_regime(entry.regime, net, transition, teacher)


def execute(cfg: ExperimentConfig, teacher=None, jobs=1):
    """Train everything ``cfg`` describes in memory.

    Returns ``(transition, teacher, records)`` with records keyed by regime
    name in config order. A teacher is developed only when some regime
    starts from it and none is passed in.
    """
    transition = build_transition(cfg)
    if cfg.needs_teacher and teacher is None:
        teacher = develop_teacher(cfg, transition)
    work = [(cfg, e, transition, teacher) for e in cfg.regimes]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(_run_one, work))
    else:
        records = [_run_one(w) for w in work]
    return transition, teacher, {e.regime.name: r for e, r in zip(cfg.regimes, records)}


def run_experiment(cfg: ExperimentConfig, out=None, load_teacher=None, jobs=1):
    """Run every regime of ``cfg`` and write the artifacts; returns the records by name."""
    out = Path(out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    done = out / "DONE"
    if done.exists():
        done.unlink()
    handler = logging.FileHandler(out / "run.log", mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.INFO)
    try:
        (out / "config.resolved.toml").write_text(dump_config(cfg), encoding="utf-8", newline="\n")
        teacher = None
        if cfg.needs_teacher and load_teacher:
            teacher = nw.snapshot_teacher(nw.load_network(load_teacher))
            check_teacher(cfg, teacher, build_transition(cfg).env1)
            log.info("loaded teacher from %s", load_teacher)
        transition, teacher, by_name = execute(cfg, teacher, jobs)
        log.info("env1 %d examples, env2 %d examples", transition.env1.size, transition.env2.size)
        if teacher is not None:
            if not load_teacher:
                log.info("trained teacher for %d epochs", cfg.teacher.epochs)
            nw.save_network(teacher, out / "teacher.json")
        records = list(by_name.values())
        for name, rec in by_name.items():
            report.emit_csv(report.curve_points(rec), out / f"{name}.csv")
            log.info("regime %s finished, %d rows", name, len(rec.rows))
        if cfg.report.zoom:
            z = cfg.report.zoom
            pts = report.curve_points(by_name[z["regime"]], epochs=(z["start"], z["stop"]))
            report.emit_csv(pts, out / "zoom.csv")
        if cfg.report.retention:
            r = cfg.report.retention
            rows = report.retention_table(records, r["old_head"], r["new_head"])
            report.emit_csv(rows, out / "retention.csv", header=report.TABLE_HEADER)
        done.write_text("ok\n", encoding="utf-8", newline="\n")
        log.info("done")
        return by_name
    finally:
        log.removeHandler(handler)
        handler.close()


def build_parser():
    p = argparse.ArgumentParser(prog="altm", description="Continual-learning regime experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("config", help="TOML experiment config")
    r.add_argument("--out", help="output directory (overrides the config)")
    r.add_argument("--seed", type=int, help="global seed (overrides the config)")
    r.add_argument("--load-teacher", help="saved teacher network; skips the development phase")
    r.add_argument("--jobs", type=int, default=1, help="regimes run concurrently")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1", key="jobs")
        cfg = parse_config(args.config, is_text=False, seed=args.seed)
        run_experiment(cfg, args.out, args.load_teacher, args.jobs)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (AltmError, ArithmeticError, ValueError, RuntimeError, KeyError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
