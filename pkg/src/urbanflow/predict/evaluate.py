"""Per-distance evaluation of intention accuracy and trajectory error."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from ..errors import InvalidArgument

# target distance before the stop line, metres; negative inside the intersection
DEFAULT_BIN_EDGES = (60.0, 50.0, 40.0, 30.0, 20.0, 10.0, 0.0, -10.0, -20.0)
ENTRY_BIN = (0.0, 10.0)


@dataclass
class BinMetrics:
    lo: float
    hi: float
    n_steps: int = 0
    direction_correct: int = 0
    yield_correct: int = 0
    n_windows: int = 0
    sq_error: float = 0.0

    @property
    def direction_accuracy(self):
        return self.direction_correct / self.n_steps if self.n_steps else None

    @property
    def yield_accuracy(self):
        return self.yield_correct / self.n_steps if self.n_steps else None

    @property
    def mse(self):
        return self.sq_error / self.n_windows if self.n_windows else None


def bin_index(dist, edges=DEFAULT_BIN_EDGES):
    """Index of the bin ``[edges[i+1], edges[i])`` containing each distance, -1 outside."""
    d = np.asarray(dist, dtype=np.float64)
    e = np.asarray(edges, dtype=np.float64)
    if np.any(np.diff(e) >= 0):
        raise InvalidArgument("bin edges must be strictly decreasing")
    idx = np.searchsorted(-e, -d, side="left") - 1
    return np.where((d < e[0]) & (d >= e[-1]), idx, -1)


def evaluate(records, intention=None, trajectory=None, edges=DEFAULT_BIN_EDGES, closed_loop=True,
             stride=1):
    """Metrics per distance bin.

    ``intention`` needs ``predict(record) -> (direction_probs, yield_probs)``.
    ``trajectory`` is a TrajectoryNet (or anything with ``windows`` and
    ``predict``); conditioned modes use the intention network's per-step
    argmax when ``closed_loop`` and ``intention`` are given, else the labels.
    MSE is the mean over windows of the horizon-averaged squared Euclidean
    error in m^2. Returns a list of BinMetrics, one per bin.
    """
    bins = [BinMetrics(lo, hi) for hi, lo in zip(edges[:-1], edges[1:])]
    for rec in records:
        probs = intention.predict(rec) if intention is not None else None
        if probs is not None:
            d_hat = np.argmax(probs[0], axis=1)
            y_hat = np.argmax(probs[1], axis=1)
            bi = bin_index(rec.target_dist_to_entry, edges)
            for k in range(len(bins)):
                sel = bi == k
                bins[k].n_steps += int(sel.sum())
                bins[k].direction_correct += int(np.sum(d_hat[sel] == rec.direction_index))
                bins[k].yield_correct += int(np.sum(y_hat[sel] == rec.yield_index))
        if trajectory is None:
            continue
        intents = None
        if probs is not None and closed_loop:
            intents = {s: (int(d_hat[s]), int(y_hat[s])) for s in range(rec.n_steps)}
        smp = trajectory.windows(rec, intents=intents, stride=stride)
        ok = np.all(np.isfinite(smp.future), axis=(1, 2))
        if not ok.any():
            continue
        smp = smp.subset(ok)
        pred = trajectory.predict(smp)
        err = np.mean(np.sum((pred - smp.future) ** 2, axis=-1), axis=1)
        bi = bin_index(smp.dist, edges)
        for k in range(len(bins)):
            sel = bi == k
            bins[k].n_windows += int(sel.sum())
            bins[k].sq_error += float(err[sel].sum())
    return bins


def overall(bins):
    """Totals across bins: (direction accuracy, yield accuracy, MSE), None when empty."""
    n = sum(b.n_steps for b in bins)
    w = sum(b.n_windows for b in bins)
    return (sum(b.direction_correct for b in bins) / n if n else None,
            sum(b.yield_correct for b in bins) / n if n else None,
            sum(b.sq_error for b in bins) / w if w else None)


def mean_mse(trajectory, records, intention=None, closed_loop=True, stride=1):
    """Average window MSE over all complete windows of ``records``."""
    return overall(evaluate(records, intention, trajectory, closed_loop=closed_loop, stride=stride))[2]


METRIC_COLUMNS = ("bin_lo_m", "bin_hi_m", "n_steps", "direction_accuracy", "yield_accuracy",
                  "n_windows", "trajectory_mse_m2")


def _cell(v):
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


def metric_row(b: BinMetrics):
    """CSV cells for one bin in METRIC_COLUMNS order; empty bins leave metrics blank, not zero."""
    return (repr(b.lo), repr(b.hi), b.n_steps, _cell(b.direction_accuracy), _cell(b.yield_accuracy),
            b.n_windows, _cell(b.mse))


def write_metrics(path, bins, header=None, label=None):
    """CSV with one row per distance bin."""
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(f"# {header}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow((("model",) if label is not None else ()) + METRIC_COLUMNS)
        for b in bins:
            w.writerow(((label,) if label is not None else ()) + metric_row(b))
