"""Task and distillation losses on column-batched logits.

Both losses are batch means. Distillation is a plain squared error between
logit matrices with no softmax temperature.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import LabelError, ParameterError, ShapeError, UnknownHeadError

CROSS_ENTROPY = "cross-entropy"
L2_DISTILL = "l2-distill"


def softmax(logits):
    z = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def check_one_hot(labels):
    labels = np.asarray(labels)
    if labels.ndim != 2 or not np.all((labels == 0) | (labels == 1)) \
            or not np.all(labels.sum(axis=0) == 1):
        raise LabelError("every label column must be exactly one-hot")


def softmax_cross_entropy(logits, labels):
    """Mean over columns of ``-log softmax(logits)[true class]``.

    Returns ``(loss, dloss/dlogits)`` with the gradient ``(p - y) / n``.
    """
    if logits.shape != labels.shape:
        raise ShapeError(f"logits {logits.shape} and labels {labels.shape} differ")
    check_one_hot(labels)
    n = logits.shape[1]
    z = logits - logits.max(axis=0, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=0, keepdims=True))
    log_p = z - log_norm
    loss = -float(np.sum(log_p * labels)) / n
    grad = (np.exp(log_p) - labels) / n
    return loss, grad


def l2_distillation(student, teacher):
    """``||s - t||_F^2 / (2 n)`` and its gradient ``(s - t) / n`` w.r.t. the student."""
    if student.shape != teacher.shape:
        raise ShapeError(f"student logits {student.shape} and teacher logits {teacher.shape} differ")
    n = student.shape[1]
    diff = student - teacher
    return float(np.sum(diff * diff)) / (2 * n), diff / n


_LOSSES = {CROSS_ENTROPY: softmax_cross_entropy, L2_DISTILL: l2_distillation}


@dataclass(frozen=True)
class LossTerm:
    """One weighted term of a composite objective.

    ``target`` is a one-hot label matrix for cross-entropy and a teacher
    logit matrix for distillation.
    """
    head: str
    kind: str
    target: np.ndarray
    weight: float = 1.0

    def __post_init__(self):
        if self.kind not in _LOSSES:
            raise ParameterError(f"unknown loss kind {self.kind!r}")
        if not self.weight >= 0:
            raise ParameterError(f"loss weight must be non-negative, got {self.weight}")


def composite_loss(terms, logits):
    """``sum_i w_i * loss_i`` and the per-head gradient sums.

    A head's gradient block is the weighted sum over the terms reading that
    head; terms may share a head.
    """
    total = 0.0
    grads = {}
    for term in terms:
        if term.head not in logits:
            raise UnknownHeadError(f"loss term reads head {term.head!r}, which was not evaluated")
        value, grad = _LOSSES[term.kind](logits[term.head], term.target)
        total += term.weight * value
        g = term.weight * grad
        grads[term.head] = grads[term.head] + g if term.head in grads else g
    return total, grads
