"""Multi-head feed-forward networks with a shared trunk.

A network maps a column batch ``x`` of shape ``(input_dim, n)`` through
the trunk layers ``h = act(W @ h + b)`` and then through each requested
head ``logits = W_head @ h + b_head``. Heads emit raw logits; softmax and
every other loss transform lives in :mod:`altm.losses`.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import linalg
from .errors import (ConflictError, ModeError, NumericalError, ParameterError,
                     ShapeError, UnknownHeadError, UsageError)

FORMAT_NAME = "altm-network"
FORMAT_VERSION = 1

DEFAULT_SIGMA = 0.1


class Network:
    """Shared trunk plus named heads.

    ``trunk`` is a list of ``(weight, bias)`` pairs with ``weight`` of shape
    ``(out, in)`` and ``bias`` of shape ``(out, 1)``; ``heads`` maps a head id
    to such a pair. The activation is applied after every trunk layer.
    """

    def __init__(self, trunk, heads, activation="linear"):
        if activation not in linalg.ACTIVATIONS:
            raise ParameterError(f"unknown activation {activation!r}")
        if not trunk:
            raise ShapeError("trunk needs at least one layer")
        self.activation = activation
        self.trunk = [(linalg.as_matrix(w, "trunk weight"), linalg.as_matrix(b, "trunk bias"))
                      for w, b in trunk]
        self.heads = {}
        self._version = 0
        for k, (w, b) in enumerate(self.trunk):
            if b.shape != (w.shape[0], 1):
                raise ShapeError(f"trunk layer {k}: bias {b.shape} does not fit weight {w.shape}")
            if k and w.shape[1] != self.trunk[k - 1][0].shape[0]:
                raise ShapeError(f"trunk layer {k} expects {w.shape[1]} inputs, "
                                 f"previous layer emits {self.trunk[k - 1][0].shape[0]}")
        for head_id, (w, b) in heads.items():
            self._add_head(head_id, linalg.as_matrix(w, "head weight"), linalg.as_matrix(b, "head bias"))

    @classmethod
    def build(cls, input_dim, hidden, heads, activation="linear", sigma=DEFAULT_SIGMA, rng=None):
        """Gaussian weights, zero biases. ``heads`` maps head id -> output dim."""
        if rng is None:
            raise ParameterError("an Rng is required to build a network")
        dims = [input_dim, *hidden]
        trunk = [(linalg.gaussian_init(dims[k + 1], dims[k], sigma, rng), np.zeros((dims[k + 1], 1)))
                 for k in range(len(hidden))]
        net = cls(trunk, {}, activation)
        for head_id, out_dim in heads.items():
            attach_head(net, head_id, out_dim, sigma, rng)
        return net

    def _add_head(self, head_id, w, b):
        if head_id in self.heads:
            raise ConflictError(f"head {head_id!r} already exists")
        if w.shape[1] != self.representation_dim:
            raise ShapeError(f"head {head_id!r} expects {w.shape[1]} inputs, "
                             f"trunk emits {self.representation_dim}")
        if b.shape != (w.shape[0], 1):
            raise ShapeError(f"head {head_id!r}: bias {b.shape} does not fit weight {w.shape}")
        self.heads[head_id] = (w, b)

    @property
    def input_dim(self):
        return self.trunk[0][0].shape[1]

    @property
    def representation_dim(self):
        return self.trunk[-1][0].shape[0]

    @property
    def head_ids(self):
        return tuple(self.heads)

    def head_dim(self, head_id):
        return _head(self, head_id)[0].shape[0]

    def parameters(self):
        """(name, array) pairs in a fixed order."""
        for k, (w, b) in enumerate(self.trunk):
            yield f"trunk.{k}.weight", w
            yield f"trunk.{k}.bias", b
        for head_id in sorted(self.heads):
            w, b = self.heads[head_id]
            yield f"head.{head_id}.weight", w
            yield f"head.{head_id}.bias", b

    def copy(self):
        net = Network([(w.copy(), b.copy()) for w, b in self.trunk],
                      {h: (w.copy(), b.copy()) for h, (w, b) in self.heads.items()},
                      self.activation)
        return net


class TeacherSnapshot:
    """Frozen copy of a network. Its arrays are read-only and it is never
    handed to :func:`sgd_step`, which is how a zero learning rate is realized."""

    def __init__(self, net):
        source = net._net if isinstance(net, TeacherSnapshot) else net
        self._net = source.copy()
        for _, arr in self._net.parameters():
            arr.setflags(write=False)

    @property
    def activation(self):
        return self._net.activation

    @property
    def head_ids(self):
        return self._net.head_ids

    @property
    def input_dim(self):
        return self._net.input_dim

    def head_dim(self, head_id):
        return self._net.head_dim(head_id)

    def parameters(self):
        return self._net.parameters()

    def network(self):
        """A fresh, trainable copy (how the student is initialized from the teacher)."""
        return self._net.copy()

    def logits(self, x, head_ids):
        return forward(self, x, head_ids)[0]


@dataclass
class ForwardCache:
    net_ref: object
    version: int
    head_ids: tuple
    pre: list            # pre-activations per trunk layer
    post: list           # post[0] is x, post[k + 1] the output of trunk layer k
    consumed: bool = field(default=False)


@dataclass
class Gradients:
    trunk: list
    heads: dict

    def items(self):
        for k, (w, b) in enumerate(self.trunk):
            yield f"trunk.{k}.weight", w
            yield f"trunk.{k}.bias", b
        for head_id in sorted(self.heads):
            w, b = self.heads[head_id]
            yield f"head.{head_id}.weight", w
            yield f"head.{head_id}.bias", b


def _unwrap(net):
    return net._net if isinstance(net, TeacherSnapshot) else net


def _head(net, head_id):
    try:
        return net.heads[head_id]
    except KeyError:
        raise UnknownHeadError(f"no head {head_id!r}; known heads: {sorted(net.heads)}") from None


def forward(net, x, head_ids):
    """Logits for every head in ``head_ids`` plus a single-use cache for :func:`backward`."""
    net = _unwrap(net)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != net.input_dim:
        raise ShapeError(f"input of shape {x.shape} does not match input dim {net.input_dim}")
    head_ids = tuple(head_ids)
    for head_id in head_ids:
        _head(net, head_id)
    pre, post = [], [x]
    h = x
    for w, b in net.trunk:
        z = linalg.matmul(w, h) + b
        h = linalg.activate(net.activation, z)
        pre.append(z)
        post.append(h)
    logits = {}
    for head_id in head_ids:
        w, b = net.heads[head_id]
        logits[head_id] = linalg.matmul(w, h) + b
    return logits, ForwardCache(net, net._version, head_ids, pre, post)


def backward(net, cache, upstream):
    """Exact gradients of a scalar loss given dLoss/dLogits per head.

    Heads absent from ``upstream`` get zero gradient blocks; the trunk
    receives the sum of every head's back-propagated error.
    """
    net = _unwrap(net)
    if cache.net_ref is not net or cache.version != net._version:
        raise UsageError("cache does not belong to the current state of this network")
    if cache.consumed:
        raise UsageError("cache was already used by a backward call")
    cache.consumed = True
    for head_id in upstream:
        _head(net, head_id)
    h = cache.post[-1]
    n = h.shape[1]
    delta = np.zeros((net.representation_dim, n))
    head_grads = {}
    for head_id, (w, b) in net.heads.items():
        if head_id not in upstream:
            head_grads[head_id] = (np.zeros_like(w), np.zeros_like(b))
            continue
        if head_id not in cache.head_ids:
            raise UsageError(f"head {head_id!r} was not part of the forward call")
        g = np.asarray(upstream[head_id], dtype=np.float64)
        if g.shape != (w.shape[0], n):
            raise ShapeError(f"upstream gradient for {head_id!r} has shape {g.shape}, "
                             f"logits have {(w.shape[0], n)}")
        head_grads[head_id] = (g @ h.T, g.sum(axis=1, keepdims=True))
        delta += w.T @ g
    trunk_grads = [None] * len(net.trunk)
    for k in range(len(net.trunk) - 1, -1, -1):
        dz = delta * linalg.activation_derivative(net.activation, cache.pre[k])
        trunk_grads[k] = (dz @ cache.post[k].T, dz.sum(axis=1, keepdims=True))
        if k:
            delta = net.trunk[k][0].T @ dz
    return Gradients(trunk_grads, head_grads)


def sgd_step(net, grads, lr):
    """In-place ``theta -= lr * grad`` on every block; returns ``net``."""
    if isinstance(net, TeacherSnapshot):
        raise UsageError("teacher snapshots are frozen")
    if not lr > 0:
        raise ParameterError(f"learning rate must be positive, got {lr}")
    if len(grads.trunk) != len(net.trunk) or set(grads.heads) != set(net.heads):
        raise ShapeError("gradient structure does not mirror the network")
    pairs = list(zip(net.trunk, grads.trunk)) + [(net.heads[h], grads.heads[h]) for h in net.heads]
    for (w, b), (gw, gb) in pairs:
        if gw.shape != w.shape or gb.shape != b.shape:
            raise ShapeError(f"gradient block {gw.shape} does not match parameter {w.shape}")
        if not (np.all(np.isfinite(gw)) and np.all(np.isfinite(gb))):
            raise NumericalError("non-finite gradient; step aborted")
    for (w, b), (gw, gb) in pairs:
        w -= lr * gw
        b -= lr * gb
    net._version += 1
    return net


def snapshot_teacher(net):
    return TeacherSnapshot(net)


def attach_head(net, head_id, out_dim, sigma, rng):
    """New head with N(0, sigma) weights and zero bias. Trunk untouched."""
    if isinstance(net, TeacherSnapshot):
        raise UsageError("teacher snapshots are frozen")
    if head_id in net.heads:
        raise ConflictError(f"head {head_id!r} already exists")
    w = linalg.gaussian_init(out_dim, net.representation_dim, sigma, rng)
    net._add_head(head_id, w, np.zeros((out_dim, 1)))
    net._version += 1
    return net


def end_to_end_map(net, head_id):
    """``W_head @ W_L @ ... @ W_1`` for a linear, bias-free network."""
    net = _unwrap(net)
    if net.activation != "linear":
        raise ModeError(f"end-to-end map needs a linear network, activation is {net.activation!r}")
    w_head, b_head = _head(net, head_id)
    if any(np.any(b) for _, b in net.trunk) or np.any(b_head):
        raise ModeError("end-to-end map needs zero biases")
    m = w_head
    for w, _ in reversed(net.trunk):
        m = linalg.matmul(m, w)
    return m


def parameter_digest(net):
    """sha256 over names, shapes and raw bytes of every parameter."""
    h = hashlib.sha256()
    for name, arr in _unwrap(net).parameters():
        h.update(name.encode())
        h.update(repr(arr.shape).encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def to_dict(net):
    net = _unwrap(net)

    def block(w, b):
        return {"rows": w.shape[0], "cols": w.shape[1],
                "weight": w.ravel().tolist(), "bias": b.ravel().tolist()}

    return {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "activation": net.activation,
        "trunk": [block(w, b) for w, b in net.trunk],
        "heads": [{"id": h, **block(*net.heads[h])} for h in net.heads],
    }


def from_dict(doc):
    if doc.get("format") != FORMAT_NAME:
        raise ParameterError(f"not a network document (format={doc.get('format')!r})")
    if doc.get("version") != FORMAT_VERSION:
        raise ParameterError(f"unsupported network format version {doc.get('version')!r}")

    def block(d):
        w = np.array(d["weight"], dtype=np.float64).reshape(d["rows"], d["cols"])
        b = np.array(d["bias"], dtype=np.float64).reshape(d["rows"], 1)
        return w, b

    heads = {}
    for d in doc["heads"]:
        if d["id"] in heads:
            raise ConflictError(f"duplicate head {d['id']!r} in network document")
        heads[d["id"]] = block(d)
    return Network([block(d) for d in doc["trunk"]], heads, doc["activation"])


def save_network(net, path):
    """Write parameters as JSON (versioned header, shapes, row-major doubles).

    Floats are written with Python's shortest round-trip repr, so a
    load reproduces every parameter bit-for-bit.
    """
    Path(path).write_text(json.dumps(to_dict(net)) + "\n")


def load_network(path):
    return from_dict(json.loads(Path(path).read_text()))


def clone(net):
    """Deep copy of a network or snapshot as a trainable network."""
    return _unwrap(net).copy()
