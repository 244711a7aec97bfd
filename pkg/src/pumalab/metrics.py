"""Evaluation quantities: accuracy, binned calibration error, discovery
curves for corrupted-data triage, and wall-clock timing."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .model import MlpModel, forward


def _probs(predictor, X):
    """Probability matrix from a single model or anything ensemble-like
    exposing predict_proba."""
    if isinstance(predictor, MlpModel):
        return forward(predictor, X)
    proba = getattr(predictor, "predict_proba", None)
    if proba is None:
        raise TypeError(f"cannot get probabilities from {type(predictor).__name__}")
    return proba(X)


def accuracy(predictor, dataset):
    """Fraction of argmax-correct predictions; ties go to the lowest
    class index."""
    if dataset.n == 0:
        raise ValueError("dataset is empty")
    p = _probs(predictor, dataset.features)
    return float((p.argmax(axis=1) == dataset.labels).mean())


@dataclass(frozen=True)
class EceReport:
    num_bins: int
    counts: tuple
    mean_confidence: tuple
    bin_accuracy: tuple
    ece: float


def ece(predictor, dataset, num_bins=15):
    """Expected calibration error over equal-width confidence bins.

    Confidence is the max predicted probability; each bin contributes
    (count/n) * |accuracy - mean confidence|.
    """
    if num_bins < 2:
        raise ValueError("num_bins must be at least 2")
    if dataset.n == 0:
        raise ValueError("dataset is empty")
    p = _probs(predictor, dataset.features)
    conf = p.max(axis=1)
    correct = (p.argmax(axis=1) == dataset.labels).astype(np.float64)
    idx = np.minimum((conf * num_bins).astype(np.intp), num_bins - 1)
    counts, mean_conf, bin_acc = [], [], []
    total = 0.0
    for b in range(num_bins):
        mask = idx == b
        c = int(mask.sum())
        counts.append(c)
        if c == 0:
            mean_conf.append(0.0)
            bin_acc.append(0.0)
            continue
        mc = float(conf[mask].mean())
        ma = float(correct[mask].mean())
        mean_conf.append(mc)
        bin_acc.append(ma)
        total += (c / dataset.n) * abs(ma - mc)
    return EceReport(num_bins, tuple(counts), tuple(mean_conf),
                     tuple(bin_acc), float(total))


@dataclass(frozen=True)
class DiscoveryCurve:
    fractions: tuple
    recalls: tuple

    def recall_at(self, fraction):
        for f, r in zip(self.fractions, self.recalls):
            if abs(f - fraction) < 1e-12:
                return r
        raise KeyError(f"fraction {fraction} not on the curve grid")


DEFAULT_GRID = tuple(round(0.05 * i, 2) for i in range(1, 21))


def discovery_curve(ranking, true_set, grid=DEFAULT_GRID):
    """Recall of the true corrupted set when inspecting the top fraction
    of a suspicion ranking. Inspected counts round up, so the curve ends
    at recall 1.0 when the whole list is read."""
    ranking = [int(i) for i in ranking]
    truth = set(int(i) for i in true_set)
    if not truth:
        raise ValueError("true corrupted set is empty")
    if not truth <= set(ranking):
        raise ValueError("true ids missing from the ranking")
    n = len(ranking)
    recalls = []
    for f in grid:
        top = ranking[:math.ceil(f * n - 1e-9)]
        recalls.append(len(truth & set(top)) / len(truth))
    return DiscoveryCurve(tuple(grid), tuple(recalls))


def timed(op):
    """Run a no-argument callable, returning (result, elapsed milliseconds)."""
    t0 = time.perf_counter()
    result = op()
    return result, (time.perf_counter() - t0) * 1000.0
