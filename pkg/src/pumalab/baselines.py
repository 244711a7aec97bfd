"""Comparison removal strategies.

Three ways to honor a removal request without the influence patch:
retrain from scratch on what is left, retrain only the sharded
sub-models that ever saw the marked points, or subtract the recorded
parameter deltas of every batch that contained one.
"""

import json
import logging
import os
from dataclasses import dataclass, replace

import numpy as np

from .model import (
    AmnesiacLedger,
    MlpModel,
    MlpSpec,
    TrainConfig,
    forward,
    init_mlp,
    load_checkpoint,
    save_checkpoint,
    train,
)

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
MANIFEST_FORMAT = "sisa-ensemble-v1"


def _rng(*entropy):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def _shard_seed(seed, index):
    ss = np.random.SeedSequence((int(seed), 0x51A5, int(index)))
    return int(ss.generate_state(1)[0])


# ---------------------------------------------------------------------------
# retrain


def retrain(train_set, marked_ids, spec, config):
    """Train a fresh model on the training set minus the marked ids."""
    marked = frozenset(int(i) for i in marked_ids)
    unknown = marked - set(int(i) for i in train_set.ids)
    if unknown:
        raise ValueError(f"marked ids not in training set: {sorted(unknown)[:5]}")
    remaining = train_set.drop(marked) if marked else train_set
    if remaining.n == 0:
        raise ValueError("every id is marked; nothing left to retrain on")
    model, _ = train(init_mlp(spec), remaining, config)
    return model


# ---------------------------------------------------------------------------
# SISA


@dataclass(frozen=True)
class SisaEnsemble:
    """Sharded ensemble: each shard is (model, member id frozenset).

    Member sets must partition the ids of ``train_set``, which is kept on
    the ensemble so a removal can retrain affected shards.
    """

    shards: tuple
    num_shards: int
    train_config: object
    train_set: object

    def __post_init__(self):
        if self.num_shards != len(self.shards):
            raise ValueError("num_shards disagrees with the shard list")
        seen = set()
        for _, members in self.shards:
            if seen & members:
                raise ValueError("shard member sets overlap")
            seen |= members
        if seen != set(int(i) for i in self.train_set.ids):
            raise ValueError("shard members do not partition the training ids")

    def member_ids(self):
        out = set()
        for _, members in self.shards:
            out |= members
        return frozenset(out)

    def predict_proba(self, x):
        return sisa_predict(self, x)


def _train_shard(train_set, members, spec, config):
    subset = train_set.take(sorted(members))
    cfg = config
    if cfg.batch_size > subset.n:  # small shards get full-batch steps
        cfg = replace(cfg, batch_size=subset.n)
    model, _ = train(init_mlp(spec), subset, cfg)
    return model


def sisa_train(train_set, num_shards, spec, config, seed=0):
    """Partition the ids uniformly at random and train one model per
    shard, each from its own derived init seed."""
    if not 1 <= num_shards <= train_set.n:
        raise ValueError("num_shards must be between 1 and the dataset size")
    perm = _rng(seed, 0x5115).permutation(train_set.n)
    base, extra = divmod(train_set.n, num_shards)
    shards = []
    offset = 0
    for i in range(num_shards):
        size = base + (1 if i < extra else 0)
        rows = perm[offset:offset + size]
        offset += size
        members = frozenset(int(train_set.ids[r]) for r in rows)
        shard_spec = MlpSpec(spec.layer_dims, spec.activation, _shard_seed(seed, i))
        shards.append((_train_shard(train_set, members, shard_spec, config), members))
    return SisaEnsemble(tuple(shards), num_shards, config, train_set)


def sisa_remove(ensemble, marked_ids):
    """Retrain only the shards whose membership intersects the marked
    set; untouched shards are carried over unchanged. A shard that loses
    every member is dropped (and logged). Returns the new ensemble and
    the original indices of the shards that were retrained."""
    marked = frozenset(int(i) for i in marked_ids)
    unknown = marked - ensemble.member_ids()
    if unknown:
        raise ValueError(f"marked ids not in the ensemble: {sorted(unknown)[:5]}")
    new_train = ensemble.train_set.drop(marked) if marked else ensemble.train_set
    shards, retrained = [], []
    for idx, (model, members) in enumerate(ensemble.shards):
        if not members & marked:
            shards.append((model, members))
            continue
        kept = members - marked
        if not kept:
            log.warning("shard %d lost all %d members; dropping it", idx, len(members))
            continue
        retrained.append(idx)
        shards.append((_train_shard(new_train, kept, model.spec,
                                    ensemble.train_config), kept))
    if not shards:
        raise ValueError("every shard lost all members; ensemble would be empty")
    return (SisaEnsemble(tuple(shards), len(shards), ensemble.train_config,
                         new_train),
            tuple(retrained))


def sisa_predict(ensemble, x):
    """Mean of the shard probability outputs."""
    if not ensemble.shards:
        raise ValueError("ensemble has no shards")
    return np.mean([forward(model, x) for model, _ in ensemble.shards], axis=0)


def save_ensemble(ensemble, dirpath):
    """One checkpoint file per shard plus a manifest mapping each shard
    to its member ids and naming the training set by content hash."""
    os.makedirs(dirpath, exist_ok=True)
    entries = []
    for i, (model, members) in enumerate(ensemble.shards):
        name = f"shard_{i:03d}.json"
        save_checkpoint(model, os.path.join(dirpath, name))
        entries.append({"checkpoint": name, "member_ids": sorted(members)})
    cfg = ensemble.train_config
    manifest = {
        "format": MANIFEST_FORMAT,
        "num_shards": ensemble.num_shards,
        "train_set_hash": ensemble.train_set.content_hash(),
        "train_config": {
            "epochs": cfg.epochs,
            "batch_size": cfg.batch_size,
            "learning_rate": cfg.learning_rate,
            "optimizer": cfg.optimizer,
            "shuffle_seed": cfg.shuffle_seed,
            "record_ledger": cfg.record_ledger,
        },
        "shards": entries,
    }
    path = os.path.join(dirpath, MANIFEST_NAME)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return path


def load_ensemble(dirpath, train_set):
    """Rebuild an ensemble from save_ensemble output. The training data
    itself is not serialized, so the caller provides it and the manifest
    hash guards against handing in the wrong one."""
    with open(os.path.join(dirpath, MANIFEST_NAME), encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != MANIFEST_FORMAT:
        raise ValueError(f"unrecognized manifest format {manifest.get('format')!r}")
    if manifest["train_set_hash"] != train_set.content_hash():
        raise ValueError("training set does not match the one this ensemble "
                         "was built from")
    cfg = TrainConfig(**manifest["train_config"])
    shards = tuple(
        (load_checkpoint(os.path.join(dirpath, e["checkpoint"])),
         frozenset(int(i) for i in e["member_ids"]))
        for e in manifest["shards"]
    )
    return SisaEnsemble(shards, manifest["num_shards"], cfg, train_set)


# ---------------------------------------------------------------------------
# Amnesiac


def amnesiac_remove(model, ledger, marked_ids):
    """Undo every training batch that contained a marked id.

    Implemented as a replay from the ledger's initial snapshot that adds
    the untouched batches' deltas in original order, which is
    algebraically the same as subtracting the touched ones but keeps the
    remove-none and remove-all identities bitwise exact.
    """
    if not isinstance(ledger, AmnesiacLedger):
        raise TypeError("amnesiac_remove needs the ledger produced by train()")
    if ledger.final_fingerprint != model.params.fingerprint():
        raise ValueError("ledger was recorded for a different model")
    marked = frozenset(int(i) for i in marked_ids)
    if not marked:
        return model
    seen = set()
    for e in ledger.entries:
        seen.update(e.member_ids)
    unknown = marked - seen
    if unknown:
        raise ValueError(f"marked ids never appeared in the ledger: "
                         f"{sorted(unknown)[:5]}")
    return MlpModel(model.spec, ledger.replay(skip_ids=marked))
