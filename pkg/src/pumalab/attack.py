"""Shadow-model membership-inference attack.

Shadows are small models trained on disjoint seeded subsets; their
outputs on member and non-member points become a binary training set
for an attack net that, given a target model's (sorted) output on a
point, guesses whether the point was trained on. The fraction of
points the attack flags is the removal-effectiveness readout.
"""

import json
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .model import (
    MlpModel,
    MlpSpec,
    TrainConfig,
    forward,
    init_mlp,
    load_checkpoint,
    save_checkpoint,
    train,
)

ATTACK_SCHEMA = "membership-attack-v1"
ATTACK_HIDDEN = (128, 64)


def _rng(*entropy):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def _derived_seed(*entropy):
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


@dataclass(frozen=True)
class ShadowSet:
    """Per shadow: (model, member ids, disjoint non-member ids)."""

    shadows: tuple
    count: int
    subset_fraction: float
    train_set: object

    def __post_init__(self):
        if self.count != len(self.shadows):
            raise ValueError("count disagrees with the shadow list")
        for _, in_ids, out_ids in self.shadows:
            if in_ids & out_ids:
                raise ValueError("shadow in/out id sets overlap")


@dataclass(frozen=True)
class AttackClassifier:
    """Binary net over [sorted target probabilities | true-label one-hot]."""

    model: MlpModel
    target_classes: int
    train_accuracy: float

    def member_probability(self, features):
        return forward(self.model, features)[:, 1]


def _attack_features(target_model, X, y, num_classes):
    """Sorted-descending output probabilities, then the true-label
    one-hot. Sorting makes the feature invariant to relabeling the
    target's classes. The target may be a single model or anything
    ensemble-like exposing predict_proba."""
    if isinstance(target_model, MlpModel):
        P = forward(target_model, X)
    else:
        P = target_model.predict_proba(X)
    P = -np.sort(-P, axis=1)
    onehot = np.zeros((len(y), num_classes))
    onehot[np.arange(len(y)), y] = 1.0
    return np.concatenate([P, onehot], axis=1)


def train_shadows(train_set, spec, count=5, subset_fraction=0.1, epochs=50,
                  seed=0, batch_size=32, learning_rate=0.1):
    """Train ``count`` shadows, each on its own seeded subset of
    ``subset_fraction``·n points, with an equal-sized disjoint holdout."""
    if count < 1:
        raise ValueError("count must be positive")
    if not 0.0 < subset_fraction <= 0.1:
        raise ValueError("subset_fraction must lie in (0, 0.1]")
    m = int(subset_fraction * train_set.n)
    if m < batch_size:
        raise ValueError(f"shadow subset of {m} points is smaller than "
                         f"batch_size {batch_size}")
    shadows = []
    for i in range(count):
        rng = _rng(seed, 0xA7AC, i)
        perm = rng.permutation(train_set.n)
        in_rows, out_rows = perm[:m], perm[m:2 * m]
        in_ids = frozenset(int(train_set.ids[r]) for r in in_rows)
        out_ids = frozenset(int(train_set.ids[r]) for r in out_rows)
        shadow_spec = MlpSpec(spec.layer_dims, spec.activation,
                              _derived_seed(seed, 0x5EED, i))
        cfg = TrainConfig(epochs, batch_size, learning_rate,
                          shuffle_seed=_derived_seed(seed, 0x5F1E, i))
        model, _ = train(init_mlp(shadow_spec), train_set.take(sorted(in_ids)),
                         cfg)
        shadows.append((model, in_ids, out_ids))
    return ShadowSet(tuple(shadows), count, subset_fraction, train_set)


def build_attack_dataset(shadow_set):
    """One row per (shadow, member/non-member point): the shadow's
    attack features labeled 1 for members and 0 for holdouts. Balanced
    by construction."""
    if not shadow_set.shadows:
        raise ValueError("shadow set is empty")
    src = shadow_set.train_set
    feats, labels = [], []
    for model, in_ids, out_ids in shadow_set.shadows:
        for ids, is_member in ((in_ids, 1), (out_ids, 0)):
            sub = src.take(sorted(ids))
            feats.append(_attack_features(model, sub.features, sub.labels,
                                          src.num_classes))
            labels.append(np.full(sub.n, is_member, dtype=np.int64))
    X = np.concatenate(feats, axis=0)
    y = np.concatenate(labels)
    return Dataset(X, y, np.arange(len(y), dtype=np.uint64),
                   name="membership-attack", num_classes=2)


def train_attack(attack_dataset, config, seed=0):
    """Fit the binary attack net; its training accuracy rides along on
    the returned classifier."""
    counts = np.bincount(attack_dataset.labels, minlength=2)
    if counts[0] != counts[1]:
        raise ValueError(f"attack dataset must be balanced, got {counts.tolist()}")
    dim = attack_dataset.dim
    if dim % 2:
        raise ValueError("attack features must be two equal halves")
    spec = MlpSpec((dim,) + ATTACK_HIDDEN + (2,), "relu",
                   _derived_seed(seed, 0xA77C))
    model, _ = train(init_mlp(spec), attack_dataset, config)
    preds = forward(model, attack_dataset.features).argmax(axis=1)
    acc = float((preds == attack_dataset.labels).mean())
    return AttackClassifier(model, dim // 2, acc)


def attack_rate(classifier, target_model, points, labels, threshold=0.5):
    """Fraction of the given points the attack flags as training members
    of the target model."""
    X = np.asarray(points, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    F = _attack_features(target_model, X, y, classifier.target_classes)
    return float((classifier.member_probability(F) > threshold).mean())


def save_attack(classifier, path):
    return save_checkpoint(classifier.model, path, extra={
        "schema": ATTACK_SCHEMA,
        "target_classes": classifier.target_classes,
        "train_accuracy": classifier.train_accuracy,
    })


def load_attack(path):
    model = load_checkpoint(path)
    with open(path, encoding="utf-8") as fh:
        extra = json.load(fh).get("extra", {})
    if extra.get("schema") != ATTACK_SCHEMA:
        raise ValueError(f"not an attack checkpoint: {extra.get('schema')!r}")
    return AttackClassifier(model, int(extra["target_classes"]),
                            float(extra["train_accuracy"]))
