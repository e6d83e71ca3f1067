"""Synthetic hierarchical environments.

Items are the leaves of a tree grown by a branching diffusion process:
every feature starts at the root as a fair +-1 coin and each child copies
its parent's value, flipping the sign with probability ``flip_prob``. Two
leaves at edge distance ``d`` then have feature correlation
``(1 - 2 * flip_prob) ** d``.

An environment crosses items with graphical transforms (fixed random
orthogonal maps or coordinate permutations of feature space). The
semantic label of an example is its item's ancestor at ``class_level``;
the graphical label is the transform index. Transform 0 is the identity.
"""
from __future__ import annotations

import csv
import hashlib
import itertools
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import LabelError, ParameterError, ShapeError, UsageError
from .linalg import Rng, derive_seed, make_rng

SEMANTIC = "semantic"
GRAPHICAL = "graphical"
FACTORS = (SEMANTIC, GRAPHICAL)


@dataclass(frozen=True)
class HierarchyConfig:
    branching: int = 2
    depth: int = 5
    num_features: int = 32
    flip_prob: float = 0.15
    seed: int = 0
    class_level: int | None = None  # None -> every leaf is its own class

    def __post_init__(self):
        if self.branching < 2:
            raise ParameterError(f"branching must be >= 2, got {self.branching}")
        if self.depth < 1:
            raise ParameterError(f"depth must be >= 1, got {self.depth}")
        if self.num_features < 1:
            raise ParameterError(f"num_features must be >= 1, got {self.num_features}")
        if not 0 <= self.flip_prob <= 0.5:
            raise ParameterError(f"flip_prob must lie in [0, 0.5], got {self.flip_prob}")
        if self.class_level is not None and not 0 <= self.class_level <= self.depth:
            raise ParameterError(f"class_level must lie in [0, depth], got {self.class_level}")

    @property
    def num_leaves(self):
        return self.branching ** self.depth

    @property
    def num_classes(self):
        level = self.depth if self.class_level is None else self.class_level
        return self.branching ** level


def gen_hierarchy(cfg: HierarchyConfig) -> np.ndarray:
    """Leaf feature matrix of shape ``(branching ** depth, num_features)``.

    Leaves are in depth-first order, so the ancestor of leaf ``i`` at level
    ``l`` is ``i // branching ** (depth - l)``.
    """
    rng = make_rng(cfg.seed)
    nodes = rng.choice([-1.0, 1.0], size=(1, cfg.num_features))
    for _ in range(cfg.depth):
        children = np.repeat(nodes, cfg.branching, axis=0)
        flips = rng.random(children.shape) < cfg.flip_prob
        nodes = np.where(flips, -children, children)
    return nodes


def item_classes(cfg: HierarchyConfig) -> np.ndarray:
    level = cfg.depth if cfg.class_level is None else cfg.class_level
    return np.arange(cfg.num_leaves) // cfg.branching ** (cfg.depth - level)


def leaf_distance(cfg: HierarchyConfig, i: int, j: int) -> int:
    """Number of tree edges between leaves ``i`` and ``j``."""
    up = 0
    while i != j:
        i //= cfg.branching
        j //= cfg.branching
        up += 1
    return 2 * up


def one_hot(indices, num_classes):
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= num_classes):
        raise LabelError(f"label out of range for {num_classes} classes")
    m = np.zeros((num_classes, indices.size))
    m[indices, np.arange(indices.size)] = 1.0
    return m


@dataclass(frozen=True, eq=False)
class Environment:
    """Labelled examples as columns.

    ``inputs`` has shape ``(dim, n)``; ``semantic`` and ``graphical`` are
    one-hot matrices with ``n`` columns.
    """
    inputs: np.ndarray
    semantic: np.ndarray
    graphical: np.ndarray
    item_ids: np.ndarray = field(default=None)
    transform_ids: np.ndarray = field(default=None)
    name: str = "env"

    def __post_init__(self):
        n = self.inputs.shape[1]
        if self.semantic.shape[1] != n or self.graphical.shape[1] != n:
            raise ShapeError("inputs and label matrices must have equal column counts")
        for labels in (self.semantic, self.graphical):
            if not (np.all((labels == 0) | (labels == 1)) and np.all(labels.sum(axis=0) == 1)):
                raise LabelError("every label column must be exactly one-hot")
        if self.item_ids is None:
            object.__setattr__(self, "item_ids", np.arange(n))
        if self.transform_ids is None:
            object.__setattr__(self, "transform_ids", self.graphical.argmax(axis=0))
        for arr in (self.inputs, self.semantic, self.graphical, self.item_ids, self.transform_ids):
            arr.setflags(write=False)

    @property
    def size(self):
        return self.inputs.shape[1]

    @property
    def dim(self):
        return self.inputs.shape[0]

    def labels(self, factor):
        if factor == SEMANTIC:
            return self.semantic
        if factor == GRAPHICAL:
            return self.graphical
        raise ParameterError(f"unknown factor {factor!r}; expected one of {FACTORS}")

    def num_classes(self, factor):
        return self.labels(factor).shape[0]

    def class_indices(self, factor):
        return self.labels(factor).argmax(axis=0)

    def chance_level(self, factor):
        """Accuracy of always predicting the most frequent class."""
        counts = self.labels(factor).sum(axis=1)
        return float(counts.max() / self.size)

    def subset(self, idx):
        return self.inputs[:, idx], self.semantic[:, idx], self.graphical[:, idx]

    def fingerprint(self):
        h = hashlib.sha256()
        for arr in (self.inputs, self.semantic, self.graphical):
            h.update(repr(arr.shape).encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]


def random_orthogonal(dim, rng):
    """Haar-distributed orthogonal matrix (QR of a Gaussian with sign fix)."""
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q * np.sign(np.diag(r))


def make_transforms(dim, count, kind, rng):
    """``count`` transforms of feature space; the first is the identity."""
    if count < 1:
        raise ParameterError(f"need at least one transform, got {count}")
    if kind == "orthogonal-linear":
        return [np.eye(dim)] + [random_orthogonal(dim, rng) for _ in range(count - 1)]
    if kind == "permutation":
        if count > math.factorial(dim):
            raise ParameterError(f"{count} transforms exceed the {math.factorial(dim)} "
                                 f"permutations of {dim} features")
        perms = [tuple(range(dim))]
        seen = set(perms)
        if count > 0.5 * math.factorial(dim):
            pool = [p for p in itertools.permutations(range(dim)) if p not in seen]
            picks = rng.permutation(len(pool))[:count - 1]
            perms += [pool[k] for k in picks]
        while len(perms) < count:
            p = tuple(int(k) for k in rng.permutation(dim))
            if p not in seen:
                seen.add(p)
                perms.append(p)
        return [np.eye(dim)[list(p)] for p in perms]
    raise ParameterError(f"unknown transform kind {kind!r}")


def _build_env(items, classes, num_classes, transforms, pairs, name):
    """Environment from explicit (item, transform) pairs."""
    cols = [transforms[t] @ items[i] for i, t in pairs]
    item_ids = np.array([i for i, _ in pairs], dtype=np.int64)
    transform_ids = np.array([t for _, t in pairs], dtype=np.int64)
    return Environment(
        inputs=np.array(cols).T.copy(),
        semantic=one_hot(classes[item_ids], num_classes),
        graphical=one_hot(transform_ids, len(transforms)),
        item_ids=item_ids,
        transform_ids=transform_ids,
        name=name,
    )


def apply_graphical_factors(items, num_transforms, kind, rng, classes=None, num_classes=None,
                            name="env"):
    """Full item x transform crossing, item-major.

    ``items`` is ``(num_items, dim)``; ``classes`` gives each item's semantic
    class (defaults to the item index).
    """
    items = np.asarray(items, dtype=np.float64)
    if num_transforms < 1:
        raise ParameterError(f"need at least one transform, got {num_transforms}")
    classes = np.arange(len(items)) if classes is None else np.asarray(classes)
    num_classes = int(classes.max()) + 1 if num_classes is None else num_classes
    transforms = make_transforms(items.shape[1], num_transforms, kind, rng)
    pairs = [(i, t) for i in range(len(items)) for t in range(num_transforms)]
    return _build_env(items, classes, num_classes, transforms, pairs, name)


@dataclass(frozen=True)
class EnvConfig:
    hierarchy: HierarchyConfig
    num_transforms: int = 1
    transform_kind: str = "orthogonal-linear"


@dataclass(frozen=True)
class TransitionSpec:
    env1: Environment
    env2: Environment
    shared_graphical: bool = False

    def __post_init__(self):
        if self.env1.dim != self.env2.dim:
            raise ParameterError(f"environments disagree on input dim: "
                                 f"{self.env1.dim} vs {self.env2.dim}")


def make_environment(cfg: EnvConfig, name="env"):
    h = cfg.hierarchy
    rng = make_rng(derive_seed(h.seed, "transforms"))
    return apply_graphical_factors(gen_hierarchy(h), cfg.num_transforms, cfg.transform_kind, rng,
                                   classes=item_classes(h), num_classes=h.num_classes, name=name)


def make_transition(dev: EnvConfig, novel: EnvConfig, shared_graphical=False):
    """Development environment (full crossing) followed by a novel one.

    The novel environment shows each item through a single transform. With
    ``shared_graphical`` that transform is drawn uniformly from the
    development transform set; otherwise it is one of the novel config's
    own transforms, assigned round-robin (the identity when it has one).
    """
    if dev.hierarchy.num_features != novel.hierarchy.num_features:
        raise ParameterError(f"input dims differ: {dev.hierarchy.num_features} vs "
                             f"{novel.hierarchy.num_features}")
    env1 = make_environment(dev, name="env1")
    if novel == dev and not shared_graphical:
        return TransitionSpec(env1, make_environment(novel, name="env2"), False)
    h = novel.hierarchy
    items = gen_hierarchy(h)
    if shared_graphical:
        source = dev
        rng = make_rng(derive_seed(h.seed, "view-assignment"))
        views = rng.integers(0, dev.num_transforms, size=len(items))
    else:
        source = novel
        views = np.arange(len(items)) % novel.num_transforms
    trng = make_rng(derive_seed(source.hierarchy.seed, "transforms"))
    transforms = make_transforms(h.num_features, source.num_transforms, source.transform_kind, trng)
    pairs = [(i, int(views[i])) for i in range(len(items))]
    env2 = _build_env(items, item_classes(h), h.num_classes, transforms, pairs, "env2")
    return TransitionSpec(env1, env2, shared_graphical)


class BatchStream:
    """Seeded shuffled mini-batches over one environment.

    Each epoch is a fresh permutation drawn from ``rng`` split into
    consecutive batches; the last, shorter batch is kept.
    """

    def __init__(self, size, batch_size, rng: Rng):
        if size < 1:
            raise UsageError("cannot draw batches from an empty environment")
        if batch_size < 1:
            raise ParameterError(f"batch size must be >= 1, got {batch_size}")
        self.size = size
        self.batch_size = batch_size
        self.rng = rng
        self._pending = deque()

    def epoch(self):
        perm = self.rng.permutation(self.size)
        return [perm[k:k + self.batch_size] for k in range(0, self.size, self.batch_size)]

    def next_batch(self):
        if not self._pending:
            self._pending.extend(self.epoch())
        return self._pending.popleft()

    def __iter__(self):
        while True:
            yield self.next_batch()


def minibatches(env: Environment, batch_size, rng: Rng):
    """Endless stream of example-index arrays, epoch after epoch."""
    return iter(BatchStream(env.size, batch_size, rng))


def write_environment_csv(env: Environment, path):
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{k}" for k in range(env.dim)] + ["y_s", "y_g"])
        ys, yg = env.class_indices(SEMANTIC), env.class_indices(GRAPHICAL)
        for j in range(env.size):
            w.writerow([f"{v:.17g}" for v in env.inputs[:, j]] + [int(ys[j]), int(yg[j])])


def read_environment_csv(path, num_semantic=None, num_graphical=None, name=None):
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if header[-2:] != ["y_s", "y_g"]:
        raise ParameterError(f"{path}: header must end with y_s,y_g")
    dim = len(header) - 2
    inputs = np.array([[float(v) for v in r[:dim]] for r in body]).T.reshape(dim, len(body))
    ys = np.array([int(r[dim]) for r in body], dtype=np.int64)
    yg = np.array([int(r[dim + 1]) for r in body], dtype=np.int64)
    return Environment(
        inputs=inputs,
        semantic=one_hot(ys, num_semantic or int(ys.max()) + 1),
        graphical=one_hot(yg, num_graphical or int(yg.max()) + 1),
        name=name or path.stem,
    )
