"""Query-distance anomaly detection in the style of PRADA.

This is a reconstruction, not a port.  For every incoming query the
detector records the ℓ2 distance to the nearest previously *accepted* query
that the victim assigned to the same class.  A query joins its class's
accepted set when that distance exceeds the class's running mean minus one
standard deviation.  Benign traffic should produce roughly Gaussian
distances; the stream is flagged when the Shapiro–Francia statistic W' of
the pooled distance history drops below ``threshold``.

Known divergences from the original detector: W' (with Blom plotting
positions) replaces Shapiro–Wilk, the threshold compares against distances
recorded *before* the current one, and a class's first query is accepted
without contributing a distance.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from statistics import NormalDist

import numpy as np

MIN_HISTORY = 30
_GROW = 64


@dataclass
class Evaluation:
    flagged: bool
    normality: float | None
    indeterminate: bool
    distances: int


def blom_quantiles(n: int) -> np.ndarray:
    nd = NormalDist()
    return np.array([nd.inv_cdf((i - 0.375) / (n + 0.25)) for i in range(1, n + 1)])


def shapiro_francia(values) -> float:
    """W' = squared correlation between the sorted sample and expected normal order statistics.

    Returns 0.0 for a zero-variance sample so that it always falls below any
    positive threshold.
    """
    x = np.sort(np.asarray(values, dtype=np.float64))
    n = len(x)
    if n < 3:
        raise ValueError("shapiro_francia needs at least 3 values")
    xc = x - x.mean()
    ss = float(xc @ xc)
    if ss <= 0.0 or not math.isfinite(ss):
        return 0.0
    m = blom_quantiles(n)
    return float((m @ xc) ** 2 / ((m @ m) * ss))


class _Bank:
    """Growable row store for one class's accepted queries."""

    def __init__(self, dim: int):
        self.rows = np.empty((_GROW, dim))
        self.size = 0

    def nearest(self, x: np.ndarray) -> float:
        diff = self.rows[: self.size] - x
        return float(np.sqrt(np.min(np.einsum("ij,ij->i", diff, diff))))

    def add(self, x: np.ndarray) -> None:
        if self.size == len(self.rows):
            self.rows = np.concatenate([self.rows, np.empty_like(self.rows)])
        self.rows[self.size] = x
        self.size += 1


@dataclass
class DetectorState:
    threshold: float = 0.9
    history: list[float] = field(default_factory=list)
    flagged: bool = False
    banks: dict[int, _Bank] = field(default_factory=dict)
    class_distances: dict[int, list[float]] = field(default_factory=dict)
    ingested: int = 0

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")

    def reset(self) -> None:
        self.history.clear()
        self.banks.clear()
        self.class_distances.clear()
        self.flagged = False
        self.ingested = 0

    def ingest(self, x, predicted_class: int) -> float | None:
        """Process one query; returns its recorded distance (None for a class's first query)."""
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        self.ingested += 1
        bank = self.banks.get(predicted_class)
        if bank is None:
            bank = self.banks[predicted_class] = _Bank(x.shape[0])
            bank.add(x)
            self.class_distances[predicted_class] = []
            return None
        d = bank.nearest(x)
        past = self.class_distances[predicted_class]
        cut = float(np.mean(past) - np.std(past)) if past else -math.inf
        past.append(d)
        self.history.append(d)
        if d > cut:
            bank.add(x)
        return d

    def evaluate(self) -> Evaluation:
        n = len(self.history)
        if n < MIN_HISTORY:
            return Evaluation(self.flagged, None, True, n)
        w = shapiro_francia(self.history)
        if w < self.threshold:
            self.flagged = True
        return Evaluation(self.flagged, w, False, n)


def replay_attack_stream(detector: DetectorState, batches, predictions, window: int = 10_000) -> dict:
    """Feed recorded query batches through ``detector`` in order.

    ``batches`` is a sequence of query arrays (one per stealing epoch) and
    ``predictions`` the matching victim answers (class ids or probability
    rows).  The report lists W' after every ``window`` queries and at every
    epoch end, the first flagged epoch, and ingestion throughput.
    """
    series = []
    epochs = []
    flag_epoch = None
    seen = 0
    start = time.perf_counter()
    for e, (xb, pb) in enumerate(zip(batches, predictions), start=1):
        xb = np.asarray(xb, dtype=np.float64).reshape(len(xb), -1)
        pb = np.asarray(pb)
        classes = pb if pb.ndim == 1 else np.argmax(pb, axis=1)
        for row, cls in zip(xb, classes):
            detector.ingest(row, int(cls))
            seen += 1
            if seen % window == 0:
                ev = detector.evaluate()
                series.append({"queries": seen, "normality": ev.normality})
        ev = detector.evaluate()
        epochs.append({"epoch": e, "queries": seen, "normality": ev.normality, "flagged": ev.flagged})
        if ev.flagged and flag_epoch is None:
            flag_epoch = e
    elapsed = time.perf_counter() - start
    final = detector.evaluate()
    return {
        "epochs": epochs,
        "flag_epoch": flag_epoch,
        "flagged": final.flagged,
        "indeterminate": final.indeterminate,
        "normality": final.normality,
        "queries": seen,
        "series": series,
        "threshold": detector.threshold,
        "throughput_qps": seen / elapsed if elapsed > 0 else None,
    }


def dumps_report(report: dict, include_timing: bool = True) -> str:
    body = dict(report)
    if not include_timing:
        body.pop("throughput_qps", None)
    return json.dumps(body, indent=2, sort_keys=True) + "\n"
