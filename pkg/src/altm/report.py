"""Post-processing of run records: curves, interference statistics,
retention tables and CSV emission.

CSV files use a fixed column order, ``%.17g`` decimals (exact float
round-trip) and LF line endings, so identical inputs give identical bytes.
Curve files have the schema ``run_id,regime,phase,epoch,head,metric,value``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, UsageError

CURVE_HEADER = ("run_id", "regime", "phase", "epoch", "head", "metric", "value")
TABLE_HEADER = ("rank", "regime", "run_id", "old_head", "new_head", "old_accuracy", "new_accuracy")
METRICS = ("loss", "accuracy")
CONVERGED_WINDOW = 10
RECOVERY_FACTOR = 1.1


@dataclass(frozen=True)
class CurvePoint:
    run_id: str
    regime: str
    phase: int
    epoch: int
    head: str
    metric: str
    value: float

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ParameterError(f"metric must be one of {METRICS}, got {self.metric!r}")
        if not math.isfinite(self.value):
            raise ParameterError(f"curve value must be finite, got {self.value}")
        if self.metric == "accuracy" and not 0.0 <= self.value <= 1.0:
            raise ParameterError(f"accuracy must lie in [0, 1], got {self.value}")


def curve_points(record, heads=None, epochs=None):
    """Flatten a record into points, rows in record order, heads sorted.

    ``epochs`` optionally keeps only points with ``lo <= epoch < hi``.
    """
    out = []
    for row in record.rows:
        if epochs is not None and not epochs[0] <= row.epoch < epochs[1]:
            continue
        for metric in METRICS:
            values = getattr(row, metric)
            for head in sorted(values):
                if heads is None or head in heads:
                    out.append(CurvePoint(record.run_id, record.regime, row.phase, row.epoch,
                                          head, metric, float(values[head])))
    return out


@dataclass(frozen=True)
class InterferenceStats:
    converged: float
    peak: float
    peak_epoch: int
    recovery_epoch: int | None

    @property
    def ratio(self):
        return self.peak / self.converged


def curve_interference(epochs, losses, switch_epoch, recovery_factor=RECOVERY_FACTOR,
                       window=CONVERGED_WINDOW):
    """Interference statistics of one loss curve around ``switch_epoch``.

    converged: mean of the last ``window`` losses before the switch.
    peak: largest loss at or after the switch.
    recovery: first epoch at or after the peak whose loss is within
    ``recovery_factor`` x converged, or None.
    """
    epochs = np.asarray(epochs)
    losses = np.asarray(losses, dtype=float)
    if not (epochs.size and epochs[0] < switch_epoch <= epochs[-1]):
        raise IndexError(f"switch epoch {switch_epoch} outside the recorded span "
                         f"[{epochs[:1]}, {epochs[-1:]}]")
    before = losses[epochs < switch_epoch]
    after = epochs >= switch_epoch
    converged = float(before[-window:].mean())
    post_e, post_l = epochs[after], losses[after]
    k = int(np.argmax(post_l))
    back = np.nonzero(post_l[k:] <= recovery_factor * converged)[0]
    recovery = int(post_e[k + back[0]]) if back.size else None
    return InterferenceStats(converged, float(post_l[k]), int(post_e[k]), recovery)


def interference_stats(record, head, switch_epoch, recovery_factor=RECOVERY_FACTOR):
    """(converged, peak, recovery epoch or None) of ``head``'s loss around a switch."""
    e, loss = record.series(head, "loss")
    s = curve_interference(e, loss, switch_epoch, recovery_factor)
    return s.converged, s.peak, s.recovery_epoch


@dataclass(frozen=True)
class RetentionRow:
    rank: int
    regime: str
    run_id: str
    old_head: str
    new_head: str
    old_accuracy: float
    new_accuracy: float


def retention_table(records, old_head, new_head):
    """One row per record at its final evaluation, sorted by old-task accuracy.

    The sort is ascending and stable, so equal accuracies keep input order;
    ``rank`` is the 1-based position.
    """
    records = list(records)
    if not records:
        return []
    ref = records[0].eval_envs
    for r in records[1:]:
        for h in (old_head, new_head):
            if r.eval_envs.get(h) != ref.get(h):
                raise UsageError(f"run {r.run_id!r} evaluated head {h!r} on a different environment "
                                 f"than run {records[0].run_id!r}")
    rows = [(r.final(old_head), r.final(new_head), r) for r in records]
    rows.sort(key=lambda t: t[0])
    return [RetentionRow(i + 1, r.regime, r.run_id, old_head, new_head, float(o), float(n))
            for i, (o, n, r) in enumerate(rows)]


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return "%.17g" % v
    return str(v)


def emit_csv(items, path, header=None):
    """Write curve points or retention rows to ``path``.

    The header follows the item type; an empty list writes only the curve
    header unless ``header`` is given.
    """
    items = list(items)
    if header is None:
        header = TABLE_HEADER if items and isinstance(items[0], RetentionRow) else CURVE_HEADER
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for it in items:
                w.writerow([_fmt(getattr(it, k)) for k in header])
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write CSV {path}: {exc.strerror}", str(path)) from exc
    return path


def read_csv(path):
    """Rows of an emitted file as dicts of strings (header keyed)."""
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


__all__ = [
    "CurvePoint", "curve_points", "InterferenceStats", "curve_interference", "interference_stats",
    "RetentionRow", "retention_table", "emit_csv", "read_csv",
]
