"""Synthetic datasets, CSV ingestion, cluster-based removal marking, label flips.

Everything here is a pure function of (inputs, seed); datasets are frozen
after construction and all randomness flows through counter-based Philox
generators so repeated calls are bit-identical.
"""

from __future__ import annotations

import csv as _csv
import hashlib
import json
import math
import os
from dataclasses import dataclass

import numpy as np


def _rng(*entropy):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


@dataclass(frozen=True)
class Dataset:
    """Feature matrix, integer labels, stable sample ids.

    ``num_classes`` is carried explicitly so subsets that lose a class
    keep the original output width.
    """

    features: np.ndarray
    labels: np.ndarray
    ids: np.ndarray
    name: str = "dataset"
    num_classes: int = 0

    def __post_init__(self):
        f = np.ascontiguousarray(np.asarray(self.features, dtype=np.float64))
        l = np.asarray(self.labels, dtype=np.int64).copy()
        i = np.asarray(self.ids, dtype=np.uint64).copy()
        if f.ndim != 2 or l.ndim != 1 or i.ndim != 1:
            raise ValueError("features must be (n,d); labels and ids must be (n,)")
        if not (f.shape[0] == l.shape[0] == i.shape[0]):
            raise ValueError("features, labels, ids must agree on n")
        if len(np.unique(i)) != i.shape[0]:
            raise ValueError("sample ids must be unique")
        k = self.num_classes if self.num_classes else (int(l.max()) + 1 if l.size else 0)
        if l.size and (l.min() < 0 or l.max() >= k):
            raise ValueError(f"labels must lie in [0, {k})")
        for arr in (f, l, i):
            arr.setflags(write=False)
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "labels", l)
        object.__setattr__(self, "ids", i)
        object.__setattr__(self, "num_classes", k)

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]

    def rows_of(self, ids):
        """Row indices of the given ids, in stored row order."""
        wanted = set(int(x) for x in ids)
        rows = [r for r, sid in enumerate(self.ids) if int(sid) in wanted]
        if len(rows) != len(wanted):
            missing = wanted - {int(self.ids[r]) for r in rows}
            raise KeyError(f"ids not in dataset: {sorted(missing)[:5]}")
        return np.asarray(rows, dtype=np.intp)

    def take(self, ids, name=None):
        rows = self.rows_of(ids)
        return Dataset(self.features[rows], self.labels[rows], self.ids[rows],
                       name or self.name, self.num_classes)

    def drop(self, ids, name=None):
        gone = set(int(x) for x in ids)
        rows = np.asarray([r for r in range(self.n) if int(self.ids[r]) not in gone],
                          dtype=np.intp)
        return Dataset(self.features[rows], self.labels[rows], self.ids[rows],
                       name or self.name, self.num_classes)

    def content_hash(self):
        h = hashlib.sha256(self.features.tobytes())
        h.update(self.labels.tobytes())
        h.update(self.ids.tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class MarkSpec:
    """How to pick the marked (to-be-removed) subset.

    ``scenario`` only matters downstream: ordered packs marked ids into
    the fewest possible training batches, random leaves batching alone.
    """

    scenario: str
    fraction: float
    kmeans_k: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.scenario not in ("ordered", "random"):
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if not (0.0 < self.fraction < 1.0):
            raise ValueError("fraction must lie in (0, 1)")
        if self.kmeans_k < 2:
            raise ValueError("kmeans_k must be at least 2")


@dataclass(frozen=True)
class MarkResult:
    """Marked id set plus the truncation flag from partial-cluster fallback."""

    ids: frozenset
    truncated: bool
    spec: MarkSpec


def _balanced_counts(n, groups):
    base, extra = divmod(n, groups)
    return [base + (1 if g < extra else 0) for g in range(groups)]


def generate(shape, n, noise, seed):
    """Sample one of the four synthetic benchmark shapes.

    radial: 2 classes, 6 Gaussian clusters on a ring. rectangular: 3
    classes over a 4x4 grid of cells. two_moons and spiral are the usual
    curves. noise=0 collapses every point onto its cluster center/curve.
    """
    rng = _rng(seed, 0xDA7A)
    if shape == "radial":
        classes = 2
        if n < classes:
            raise ValueError("n must be at least the number of classes")
        counts = _balanced_counts(n, 6)
        feats, labels = [], []
        for c in range(6):
            ang = 2.0 * math.pi * c / 6.0
            center = np.array([2.0 * math.cos(ang), 2.0 * math.sin(ang)])
            pts = center + noise * rng.standard_normal((counts[c], 2))
            feats.append(pts)
            labels.append(np.full(counts[c], c % 2))
    elif shape == "rectangular":
        classes = 3
        if n < classes:
            raise ValueError("n must be at least the number of classes")
        counts = _balanced_counts(n, 16)
        feats, labels = [], []
        for cell in range(16):
            gi, gj = divmod(cell, 4)
            center = np.array([gi - 1.5, gj - 1.5])
            pts = center + noise * rng.standard_normal((counts[cell], 2))
            feats.append(pts)
            labels.append(np.full(counts[cell], cell % 3))
    elif shape == "two_moons":
        classes = 2
        if n < classes:
            raise ValueError("n must be at least the number of classes")
        counts = _balanced_counts(n, 2)
        t0 = rng.uniform(0.0, math.pi, counts[0])
        t1 = rng.uniform(0.0, math.pi, counts[1])
        upper = np.stack([np.cos(t0), np.sin(t0)], axis=1)
        lower = np.stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)], axis=1)
        feats = [upper + noise * rng.standard_normal(upper.shape),
                 lower + noise * rng.standard_normal(lower.shape)]
        labels = [np.zeros(counts[0]), np.ones(counts[1])]
    elif shape == "spiral":
        classes = 2
        if n < classes:
            raise ValueError("n must be at least the number of classes")
        counts = _balanced_counts(n, 2)
        feats, labels = [], []
        for arm in range(2):
            t = rng.uniform(0.5, 3.0 * math.pi, counts[arm])
            r = 0.25 * t
            pts = np.stack([r * np.cos(t + arm * math.pi),
                            r * np.sin(t + arm * math.pi)], axis=1)
            feats.append(pts + noise * rng.standard_normal(pts.shape))
            labels.append(np.full(counts[arm], arm))
    else:
        raise ValueError(f"unknown shape {shape!r}")
    features = np.concatenate(feats, axis=0)
    lab = np.concatenate(labels).astype(np.int64)
    return Dataset(features, lab, np.arange(n, dtype=np.uint64),
                   name=shape, num_classes=classes)


# ---------------------------------------------------------------------------
# CSV


def save_csv(dataset, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = _csv.writer(fh)
        w.writerow([f"f{j}" for j in range(dataset.dim)] + ["label"])
        for row, lab in zip(dataset.features, dataset.labels):
            w.writerow([repr(float(v)) for v in row] + [int(lab)])
    return path


def load_csv(path, label_column="label", return_stats=False):
    """Load a feature CSV, standardizing every column to zero mean / unit
    variance. ``return_stats`` also yields the per-column (mean, std)."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"no such csv: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = _csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise ValueError(f"{path}: empty file")
        if label_column not in header:
            raise ValueError(f"{path}: label column {label_column!r} not in header")
        label_idx = header.index(label_column)
        feat_cols = [j for j in range(len(header)) if j != label_idx]
        feats, raw_labels = [], []
        for rix, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}: row {rix} has {len(row)} cells, expected {len(header)}")
            vals = []
            for j in feat_cols:
                try:
                    vals.append(float(row[j]))
                except ValueError:
                    raise ValueError(
                        f"{path}: non-numeric cell at row {rix}, column {header[j]!r}: {row[j]!r}"
                    ) from None
            lab = row[label_idx].strip()
            if lab == "":
                raise ValueError(f"{path}: unknown label value at row {rix}: empty")
            feats.append(vals)
            raw_labels.append(lab)
    if not feats:
        raise ValueError(f"{path}: no data rows")
    X = np.asarray(feats, dtype=np.float64)
    # integer-looking labels keep their numeric order; anything else is
    # treated as categorical over sorted distinct values
    try:
        nums = [int(s) for s in raw_labels]
        classes = sorted(set(nums))
        mapping = {c: i for i, c in enumerate(classes)}
        labels = np.asarray([mapping[v] for v in nums], dtype=np.int64)
    except ValueError:
        classes = sorted(set(raw_labels))
        mapping = {c: i for i, c in enumerate(classes)}
        labels = np.asarray([mapping[v] for v in raw_labels], dtype=np.int64)
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std_safe = np.where(std == 0.0, 1.0, std)
    Xs = (X - mean) / std_safe
    name = os.path.splitext(os.path.basename(path))[0]
    ds = Dataset(Xs, labels, np.arange(X.shape[0], dtype=np.uint64),
                 name=name, num_classes=len(classes))
    if return_stats:
        stats = {f"f{j}" if header[feat_cols[j]] == "" else header[feat_cols[j]]:
                 (float(mean[j]), float(std[j])) for j in range(len(feat_cols))}
        return ds, stats
    return ds


# ---------------------------------------------------------------------------
# k-means (Lloyd, k-means++ seeding)


def kmeans(features, k, seed, iters=50, tol=1e-6):
    """Plain Lloyd iterations; empty clusters restart at the farthest point."""
    X = np.asarray(features, dtype=np.float64)
    n = X.shape[0]
    if k > n:
        raise ValueError("k exceeds number of points")
    ent = tuple(seed) if isinstance(seed, (tuple, list)) else (seed,)
    rng = _rng(*ent, 0x6B6D)
    # k-means++ seeding
    centers = np.empty((k, X.shape[1]))
    first = int(rng.integers(n))
    centers[0] = X[first]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for c in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[c] = X[int(rng.integers(n))]
        else:
            probs = d2 / total
            centers[c] = X[int(rng.choice(n, p=probs))]
        d2 = np.minimum(d2, np.sum((X - centers[c]) ** 2, axis=1))
    assign = np.zeros(n, dtype=np.intp)
    for _ in range(iters):
        dists = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assign = dists.argmin(axis=1)
        moved = 0.0
        for c in range(k):
            members = X[assign == c]
            if len(members) == 0:
                far = int(dists.min(axis=1).argmax())
                new = X[far]
            else:
                new = members.mean(axis=0)
            moved = max(moved, float(np.linalg.norm(new - centers[c])))
            centers[c] = new
        if moved < tol:
            break
    dists = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    assign = dists.argmin(axis=1)
    return assign, centers


def mark_for_removal(dataset, spec):
    """Pick whole per-class k-means clusters until the fraction is met.

    Clusters are consumed largest-first (centroid norm, then index, break
    ties); when the per-class target lands inside a cluster that cluster
    is truncated by ascending id and the result is flagged.
    """
    if spec.fraction * dataset.n < 1.0:
        raise ValueError("fraction * n must be at least 1")
    marked = []
    truncated = False
    for c in range(dataset.num_classes):
        rows = np.where(dataset.labels == c)[0]
        if rows.size == 0:
            continue
        # epsilon guards ceil against float dust in fraction * n
        target = min(int(math.ceil(spec.fraction * rows.size - 1e-9)), int(rows.size))
        if target == 0:
            continue
        k = min(spec.kmeans_k, rows.size)
        assign, centers = kmeans(dataset.features[rows], k, (spec.seed, c))
        order = sorted(
            range(k),
            key=lambda ci: (-int(np.sum(assign == ci)),
                            float(np.linalg.norm(centers[ci])), ci),
        )
        got = 0
        for ci in order:
            member_rows = rows[assign == ci]
            if got >= target:
                break
            if got + member_rows.size <= target:
                marked.extend(int(dataset.ids[r]) for r in member_rows)
                got += member_rows.size
            else:
                need = target - got
                chosen = sorted(int(dataset.ids[r]) for r in member_rows)[:need]
                marked.extend(chosen)
                got = target
                truncated = True
    return MarkResult(frozenset(marked), truncated, spec)


def save_marking(result, path):
    payload = {
        "ids": sorted(int(i) for i in result.ids),
        "truncated": bool(result.truncated),
        "spec": {
            "scenario": result.spec.scenario,
            "fraction": result.spec.fraction,
            "kmeans_k": result.spec.kmeans_k,
            "seed": result.spec.seed,
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
    return path


# ---------------------------------------------------------------------------
# corruption and splitting


def flip_labels(dataset, fraction, seed):
    """Flip exactly floor(fraction*n) labels, each to a different class."""
    if not (0.0 < fraction < 1.0):
        raise ValueError("fraction must lie in (0, 1)")
    if dataset.num_classes < 2:
        raise ValueError("need at least 2 classes to flip")
    count = int(fraction * dataset.n)
    rng = _rng(seed,  0xF11B)
    rows = rng.choice(dataset.n, size=count, replace=False)
    labels = dataset.labels.copy()
    draws = rng.integers(0, dataset.num_classes - 1, size=count)
    for r, d in zip(rows, draws):
        old = labels[r]
        labels[r] = d if d < old else d + 1
    flipped = frozenset(int(dataset.ids[r]) for r in rows)
    out = Dataset(dataset.features, labels, dataset.ids,
                  name=dataset.name + "+flips", num_classes=dataset.num_classes)
    return out, flipped


def split(dataset, test_fraction, seed):
    """Stratified train/test split with disjoint ids."""
    if not (0.0 < test_fraction < 1.0):
        raise ValueError("test_fraction must lie in (0, 1)")
    rng = _rng(seed, 0x5714)
    test_rows = []
    for c in range(dataset.num_classes):
        rows = np.where(dataset.labels == c)[0]
        if rows.size < 2:
            raise ValueError(f"class {c} has fewer than 2 samples")
        want = int(round(test_fraction * rows.size))
        want = min(max(want, 1), rows.size - 1)
        perm = rng.permutation(rows.size)
        test_rows.extend(rows[perm[:want]])
    test_mask = np.zeros(dataset.n, dtype=bool)
    test_mask[np.asarray(test_rows, dtype=np.intp)] = True
    tr = np.where(~test_mask)[0]
    te = np.where(test_mask)[0]
    mk = lambda rows, tag: Dataset(dataset.features[rows], dataset.labels[rows],
                                   dataset.ids[rows], f"{dataset.name}-{tag}",
                                   dataset.num_classes)
    return mk(tr, "train"), mk(te, "test")
