"""Training protocols over a two-environment transition.

Every regime trains a set of *old* tasks (heads read on ``env1``) and one
*new* task (a head read on ``env2``):

``sequential``
    old tasks on env1, then the new task alone on env2 with the trunk
    warm-started and the new head freshly attached.
``interleaved``
    old and new tasks alternate every ``interleave_period`` epochs, both
    heads resident from the start, only the active side trained.
``multitask``
    optional old-only warm-up, then each step takes one batch from each
    environment and descends the weighted sum of all task losses.
``altm-replay`` / ``altm-naive``
    a student initialized from a frozen teacher learns the new task while
    distilling the teacher's old-head logits, on retained env1 inputs
    (replay) or on the current env2 batch (naive).

Epoch ``e`` in a :class:`RunRecord` is the state after ``e`` training
epochs; epoch 0 is the state before any training. During joint phases an
epoch is one pass over env2; env1 batches are drawn from their own endless
stream.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import network as nw
from .datagen import FACTORS, BatchStream, Environment, TransitionSpec
from .errors import ParameterError, ShapeError, UsageError
from .linalg import derive_seed, make_rng
from .losses import CROSS_ENTROPY, L2_DISTILL, LossTerm, composite_loss, softmax_cross_entropy

KINDS = ("sequential", "interleaved", "multitask", "altm-naive", "altm-replay")

DEFAULT_OLD_WEIGHT = {"multitask": 1.0, "altm-naive": 0.1, "altm-replay": 0.1,
                      "sequential": 1.0, "interleaved": 1.0}


@dataclass(frozen=True)
class TaskSpec:
    head: str
    factor: str = "semantic"

    def __post_init__(self):
        if self.factor not in FACTORS:
            raise ParameterError(f"task factor must be one of {FACTORS}, got {self.factor!r}")


@dataclass(frozen=True)
class RegimeConfig:
    """One training experiment.

    ``phase_epochs`` is ``(old, new)``: epochs on the old tasks, then epochs
    of the regime's second phase (new task alone, joint, or distillation).
    For ``interleaved`` the two are summed into one alternating schedule;
    A-LTM regimes take ``(0, new)`` because their old phase is the teacher's
    development run. ``lr`` is a single rate or one per phase.
    ``batch_size`` 0 means full batch. ``old_weight`` defaults to 1.0 for
    multitask and 0.1 for A-LTM; it scales every old-task term.
    """
    kind: str
    old_tasks: tuple = (TaskSpec("A"),)
    new_task: TaskSpec = TaskSpec("B")
    phase_epochs: tuple = (500, 500)
    lr: tuple = (0.05,)
    batch_size: int = 0
    interleave_period: int = 50
    old_weight: float | None = None
    new_weight: float = 1.0
    sigma: float = nw.DEFAULT_SIGMA
    seed: int = 0
    eval_every: int = 1
    replay_cap: int = 0
    old_targets: str = "teacher"
    name: str = ""
    head_weights: tuple = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"regime kind must be one of {KINDS}, got {self.kind!r}")
        set_ = lambda k, v: object.__setattr__(self, k, v)  # noqa: E731
        set_("old_tasks", tuple(self.old_tasks))
        set_("phase_epochs", tuple(int(e) for e in np.atleast_1d(self.phase_epochs)))
        set_("lr", tuple(float(v) for v in np.atleast_1d(self.lr)))
        if len(self.phase_epochs) == 1:
            set_("phase_epochs", (0, self.phase_epochs[0]) if self.is_altm else (self.phase_epochs[0], 0))
        if len(self.phase_epochs) != 2 or min(self.phase_epochs) < 0:
            raise ParameterError(f"phase_epochs must be two non-negative counts, got {self.phase_epochs}")
        if sum(self.phase_epochs) < 1:
            raise ParameterError("phase_epochs must total at least 1 epoch")
        if len(self.lr) == 1:
            set_("lr", self.lr * 2)
        if len(self.lr) != 2 or min(self.lr) <= 0:
            raise ParameterError(f"lr must be positive, one value or one per phase, got {self.lr}")
        if self.interleave_period < 1:
            raise ParameterError(f"interleave_period must be >= 1, got {self.interleave_period}")
        if self.old_weight is None:
            set_("old_weight", DEFAULT_OLD_WEIGHT[self.kind])
        hw = self.head_weights.items() if isinstance(self.head_weights, dict) else self.head_weights
        set_("head_weights", tuple(sorted((str(h), float(w)) for h, w in hw)))
        if self.old_weight < 0 or self.new_weight < 0 or any(w < 0 for _, w in self.head_weights):
            raise ParameterError("loss weights must be non-negative")
        stray = {h for h, _ in self.head_weights} - {t.head for t in self.old_tasks}
        if stray:
            raise ParameterError(f"head_weights names heads that are not old tasks: {sorted(stray)}")
        if self.batch_size < 0 or self.eval_every < 1 or self.replay_cap < 0:
            raise ParameterError("batch_size, replay_cap must be >= 0 and eval_every >= 1")
        if not self.sigma > 0:
            raise ParameterError(f"sigma must be positive, got {self.sigma}")
        if self.old_targets not in ("teacher", "labels"):
            raise ParameterError(f"old_targets must be 'teacher' or 'labels', got {self.old_targets!r}")
        heads = [t.head for t in self.old_tasks] + [self.new_task.head]
        if not self.old_tasks or len(set(heads)) != len(heads):
            raise ParameterError(f"task heads must be non-empty and distinct, got {heads}")
        if self.is_altm and self.phase_epochs[0]:
            raise ParameterError("A-LTM regimes have no old phase; use phase_epochs = (0, n)")
        if not self.name:
            set_("name", self.kind)

    @property
    def is_altm(self):
        return self.kind.startswith("altm")

    def weight_of(self, head):
        """Weight of an old-task term: the per-head override, else ``old_weight``."""
        return dict(self.head_weights).get(head, self.old_weight)

    @property
    def heads(self):
        return [t.head for t in self.old_tasks] + [self.new_task.head]


@dataclass
class EvalRow:
    phase: int
    epoch: int
    loss: dict
    accuracy: dict
    wall_time: float = field(default=0.0, compare=False)


@dataclass
class RunRecord:
    run_id: str
    regime: str
    rows: list
    network: nw.Network | None = field(default=None, compare=False)
    teacher: nw.TeacherSnapshot | None = field(default=None, compare=False)
    switches: list = field(default_factory=list)
    eval_envs: dict = field(default_factory=dict)
    checkpoints: dict = field(default_factory=dict)

    def series(self, head, metric="loss"):
        """``(epochs, values)`` arrays for one head; rows lacking it are skipped."""
        pts = [(r.epoch, getattr(r, metric)[head]) for r in self.rows if head in getattr(r, metric)]
        if not pts:
            raise UsageError(f"record {self.run_id!r} has no {metric} values for head {head!r}")
        e, v = zip(*pts)
        return np.array(e), np.array(v)

    def final(self, head, metric="accuracy"):
        return self.series(head, metric)[1][-1]

    def numeric_content(self):
        return [(r.phase, r.epoch, sorted(r.loss.items()), sorted(r.accuracy.items()))
                for r in self.rows]


def evaluate(net, env: Environment, head, factor="semantic"):
    """Mean cross-entropy and accuracy of ``head`` against ``env``'s labels.

    Accuracy counts columns whose argmax logit equals the label; ties go to
    the lowest class index.
    """
    labels = env.labels(factor)
    logits = nw.forward(net, env.inputs, [head])[0][head]
    if logits.shape[0] != labels.shape[0]:
        raise ShapeError(f"head {head!r} emits {logits.shape[0]} classes, "
                         f"{factor} labels have {labels.shape[0]}")
    loss, _ = softmax_cross_entropy(logits, labels)
    acc = float(np.mean(logits.argmax(axis=0) == labels.argmax(axis=0)))
    return loss, acc


class _Run:
    """Mutable state shared by the phases of one regime run."""

    def __init__(self, net, transition, cfg, teacher=None):
        self.cfg = cfg
        self.t = transition
        self.net = nw.clone(net)
        self.teacher = teacher
        self.rows = []
        self.switches = []
        self.checkpoints = {}
        self.epoch = 0
        self.start = time.perf_counter()
        self.head_rng = make_rng(derive_seed(cfg.seed, "head-init"))
        n1, n2 = transition.env1.size, transition.env2.size
        self.stream1 = BatchStream(n1, cfg.batch_size or n1, make_rng(derive_seed(cfg.seed, "batches-env1")))
        self.stream2 = BatchStream(n2, cfg.batch_size or n2, make_rng(derive_seed(cfg.seed, "batches-env2")))
        for task in cfg.old_tasks:
            if task.head not in self.net.heads:
                raise UsageError(f"network lacks old-task head {task.head!r}")
            self._check_head(task, transition.env1)

    def _check_head(self, task, env):
        k = env.num_classes(task.factor)
        if self.net.head_dim(task.head) != k:
            raise UsageError(f"head {task.head!r} has {self.net.head_dim(task.head)} outputs, "
                             f"{task.factor} task has {k} classes")

    def attach_new_head(self):
        task = self.cfg.new_task
        if task.head not in self.net.heads:
            k = self.t.env2.num_classes(task.factor)
            nw.attach_head(self.net, task.head, k, self.cfg.sigma, self.head_rng)
        self._check_head(task, self.t.env2)

    def log(self, phase):
        loss, acc = {}, {}
        evals = [(t, self.t.env1) for t in self.cfg.old_tasks] + [(self.cfg.new_task, self.t.env2)]
        for task, env in evals:
            if task.head in self.net.heads:
                loss[task.head], acc[task.head] = evaluate(self.net, env, task.head, task.factor)
        self.rows.append(EvalRow(phase, self.epoch, loss, acc, time.perf_counter() - self.start))

    def end_epoch(self, phase):
        self.epoch += 1
        if self.epoch % self.cfg.eval_every == 0:
            self.log(phase)

    def trunk_digest(self):
        return nw.parameter_digest(nw.Network(self.net.trunk, {}, self.net.activation))

    def step(self, batches, lr):
        """One SGD step on the summed gradients of ``(x, head_ids, terms)`` batches."""
        total = None
        for x, head_ids, terms in batches:
            logits, cache = nw.forward(self.net, x, head_ids)
            _, upstream = composite_loss(terms, logits)
            g = nw.backward(self.net, cache, upstream)
            total = g if total is None else _add(total, g)
        nw.sgd_step(self.net, total, lr)

    def _ce_terms(self, tasks, env, idx, weight=None):
        """Cross-entropy terms; ``weight`` None takes each old head's configured weight."""
        return [LossTerm(t.head, CROSS_ENTROPY, env.labels(t.factor)[:, idx],
                         self.cfg.weight_of(t.head) if weight is None else weight) for t in tasks]

    def single_env_epoch(self, side, lr, phase):
        if side == "old":
            env, tasks, stream = self.t.env1, self.cfg.old_tasks, self.stream1
        else:
            env, tasks, stream = self.t.env2, (self.cfg.new_task,), self.stream2
        heads = [t.head for t in tasks]
        for idx in stream.epoch():
            self.step([(env.inputs[:, idx], heads, self._ce_terms(tasks, env, idx, 1.0))], lr)
        self.end_epoch(phase)

    def joint_epoch(self, lr, phase, old_source):
        """One pass over env2 adding old-task terms each step.

        ``old_source`` is ``"labels"`` (multitask), ``"teacher-replay"`` or
        ``"teacher-current"``.
        """
        cfg, env1, env2 = self.cfg, self.t.env1, self.t.env2
        old_heads = [t.head for t in cfg.old_tasks]
        new = cfg.new_task
        for idx2 in self.stream2.epoch():
            x2 = env2.inputs[:, idx2]
            new_terms = self._ce_terms((new,), env2, idx2, cfg.new_weight)
            if old_source == "teacher-current":
                targets = self.teacher_logits["env2"]
                old_terms = [LossTerm(h, L2_DISTILL, targets[h][:, idx2], cfg.weight_of(h))
                             for h in old_heads]
                self.step([(x2, old_heads + [new.head], old_terms + new_terms)], lr)
                continue
            idx1 = self.replay_index[self.stream1.next_batch()]
            if old_source == "labels":
                old_terms = self._ce_terms(cfg.old_tasks, env1, idx1)
            else:
                targets = self.teacher_logits["env1"]
                old_terms = [LossTerm(h, L2_DISTILL, targets[h][:, idx1], cfg.weight_of(h))
                             for h in old_heads]
            self.step([(env1.inputs[:, idx1], old_heads, old_terms), (x2, [new.head], new_terms)], lr)
        self.end_epoch(phase)

    def record(self):
        envs = {t.head: self.t.env1.fingerprint() for t in self.cfg.old_tasks}
        envs[self.cfg.new_task.head] = self.t.env2.fingerprint()
        return RunRecord(self.cfg.name, self.cfg.kind, self.rows, self.net, self.teacher,
                         self.switches, envs, self.checkpoints)


def _add(g1, g2):
    return nw.Gradients([(a + c, b + d) for (a, b), (c, d) in zip(g1.trunk, g2.trunk)],
                        {h: (g1.heads[h][0] + g2.heads[h][0], g1.heads[h][1] + g2.heads[h][1])
                         for h in g1.heads})


def _expect(cfg, kinds):
    if cfg.kind not in kinds:
        raise UsageError(f"config of kind {cfg.kind!r} passed to a {'/'.join(kinds)} trainer")


def _old_phase(run):
    cfg = run.cfg
    for _ in range(cfg.phase_epochs[0]):
        run.single_env_epoch("old", cfg.lr[0], 1)


def train_sequential(net, transition: TransitionSpec, cfg: RegimeConfig) -> RunRecord:
    _expect(cfg, ("sequential",))
    run = _Run(net, transition, cfg)
    run.log(0)
    _old_phase(run)
    run.checkpoints["phase1_end_trunk"] = run.trunk_digest()
    run.attach_new_head()
    run.checkpoints["phase2_start_trunk"] = run.trunk_digest()
    run.switches.append(run.epoch + 1)
    for _ in range(cfg.phase_epochs[1]):
        run.single_env_epoch("new", cfg.lr[1], 2)
    return run.record()


def train_interleaved(net, transition: TransitionSpec, cfg: RegimeConfig) -> RunRecord:
    """Alternate old/new segments of ``interleave_period`` epochs, starting with old.

    Each segment is its own phase (1, 2, 3, ...); segments are always trained
    at ``lr[0]``.
    """
    _expect(cfg, ("interleaved",))
    run = _Run(net, transition, cfg)
    run.attach_new_head()
    run.log(0)
    total = sum(cfg.phase_epochs)
    for e in range(total):
        segment = e // cfg.interleave_period
        if e and e % cfg.interleave_period == 0:
            run.switches.append(run.epoch + 1)
        run.single_env_epoch("old" if segment % 2 == 0 else "new", cfg.lr[0], segment + 1)
    return run.record()


def _joint(run, old_source):
    cfg = run.cfg
    run.switches.append(run.epoch + 1)
    for _ in range(cfg.phase_epochs[1]):
        run.joint_epoch(cfg.lr[1], 2, old_source)


def _retain_env1(run):
    """Keep all env1 examples for replay, or a uniform subsample of ``replay_cap``."""
    cfg, size = run.cfg, run.t.env1.size
    if not cfg.replay_cap or cfg.replay_cap >= size:
        run.replay_index = np.arange(size)
        return
    rng = make_rng(derive_seed(cfg.seed, "replay-buffer"))
    run.replay_index = np.sort(rng.choice(size, size=cfg.replay_cap, replace=False))
    run.stream1 = BatchStream(cfg.replay_cap, cfg.batch_size or cfg.replay_cap, run.stream1.rng)


def train_multitask(net, transition: TransitionSpec, cfg: RegimeConfig) -> RunRecord:
    """Old-only warm-up for ``phase_epochs[0]`` epochs, then joint training."""
    _expect(cfg, ("multitask",))
    run = _Run(net, transition, cfg)
    run.attach_new_head()
    run.log(0)
    _old_phase(run)
    _retain_env1(run)
    _joint(run, "labels")
    return run.record()


def train_altm(net, teacher: nw.TeacherSnapshot, transition: TransitionSpec, cfg: RegimeConfig,
               replay: bool | None = None) -> RunRecord:
    """Student ``net`` (normally a copy of ``teacher``) learns the new task
    while matching the teacher's old-head logits.

    With ``cfg.old_targets == "labels"`` the teacher logits are replaced by
    env1's one-hot labels under cross-entropy, which turns the replay
    variant into the joint phase of :func:`train_multitask`.
    """
    _expect(cfg, ("altm-naive", "altm-replay"))
    if replay is None:
        replay = cfg.kind == "altm-replay"
    if replay != (cfg.kind == "altm-replay"):
        raise UsageError(f"replay={replay} contradicts regime kind {cfg.kind!r}")
    if not isinstance(teacher, nw.TeacherSnapshot):
        raise UsageError("teacher must be a TeacherSnapshot")
    for task in cfg.old_tasks:
        if task.head not in teacher.head_ids:
            raise UsageError(f"teacher lacks old-task head {task.head!r}")
        if task.head in net.heads and net.head_dim(task.head) != teacher.head_dim(task.head):
            raise UsageError(f"student and teacher disagree on head {task.head!r}")
    if cfg.old_targets == "labels" and not replay:
        raise UsageError("label targets need replayed env1 inputs")
    run = _Run(net, transition, cfg, teacher)
    old_heads = [t.head for t in cfg.old_tasks]
    run.teacher_logits = {
        "env1": nw.forward(teacher, transition.env1.inputs, old_heads)[0],
        "env2": nw.forward(teacher, transition.env2.inputs, old_heads)[0],
    }
    run.attach_new_head()
    run.log(0)
    _retain_env1(run)
    if not replay:
        source = "teacher-current"
    else:
        source = "labels" if cfg.old_targets == "labels" else "teacher-replay"
    _joint(run, source)
    return run.record()


def train_teacher(net, env: Environment, tasks, epochs, lr, batch_size=0, seed=0):
    """Development phase: joint cross-entropy on every ``task`` over ``env``.

    Returns the trained network (the caller snapshots it).
    """
    cfg = RegimeConfig("sequential", old_tasks=tuple(tasks), new_task=TaskSpec("__unused__"),
                       phase_epochs=(epochs, 0), lr=lr, batch_size=batch_size, seed=seed,
                       eval_every=max(epochs, 1), name="teacher")
    run = _Run(net, TransitionSpec(env, env), cfg)
    _old_phase(run)
    return run.net


def run_regime(cfg: RegimeConfig, net, transition, teacher=None) -> RunRecord:
    """Dispatch on ``cfg.kind``. A-LTM regimes start the student from ``teacher``."""
    if cfg.kind == "sequential":
        return train_sequential(net, transition, cfg)
    if cfg.kind == "interleaved":
        return train_interleaved(net, transition, cfg)
    if cfg.kind == "multitask":
        return train_multitask(net, transition, cfg)
    if teacher is None:
        raise UsageError(f"{cfg.kind} needs a teacher snapshot")
    return train_altm(teacher.network(), teacher, transition, cfg)


__all__ = [
    "KINDS", "TaskSpec", "RegimeConfig", "EvalRow", "RunRecord", "evaluate",
    "train_sequential", "train_interleaved", "train_multitask", "train_altm",
    "train_teacher", "run_regime",
]
