# %% [markdown]
# Membership attack walkthrough
# =============================
#
# Accuracy after removal says nothing about whether the removed points
# still leak. The direct measurement is a membership inference attack:
# train shadow models that imitate the target, learn what "was in the
# training set" looks like from their confidence patterns, then ask the
# attack how many of the marked points it still flags as members.

# %%
import numpy as np

from pumalab.data import MarkSpec, generate, mark_for_removal
from pumalab.model import LossKind, MlpSpec, TrainConfig, init_mlp, train
from pumalab.influence import CriterionSpec, LissaConfig
from pumalab.puma import RemovalConfig, remove
from pumalab.baselines import retrain
from pumalab.attack import (attack_rate, build_attack_dataset, train_attack,
                            train_shadows)
from pumalab.metrics import accuracy

train_set = generate("radial", 600, 0.25, seed=11)
spec = MlpSpec((2, 64, 32, 2), "relu", 7)
target, _ = train(init_mlp(spec), train_set, TrainConfig(60, 32, 0.1, shuffle_seed=3))
print(f"target accuracy on its own training set: {accuracy(target, train_set):.3f}")

# %%
# Shadow models never see the target's parameters. Each one trains on its
# own small subset of the data distribution, with an equal-sized holdout,
# so member and non-member confidence patterns come in balanced pairs.
shadows = train_shadows(train_set, spec, count=5, subset_fraction=0.1,
                        epochs=50, seed=13)
attack_ds = build_attack_dataset(shadows)
clf = train_attack(attack_ds, TrainConfig(100, 32, 0.1, shuffle_seed=17), seed=17)
print(f"attack net trained on {attack_ds.n} labeled confidence vectors,"
      f" training accuracy {clf.train_accuracy:.3f}")

# %%
# Mark the 100 training points closest to one spot on the outer ring, a
# stand-in for a single user whose records sit together in feature space.
center = np.array([2.0, 0.0])
dist = np.linalg.norm(train_set.features - center, axis=1)
marked_ids = train_set.ids[np.argsort(dist)[:100]]
marked = train_set.take(marked_ids)
remaining = train_set.drop(marked_ids)
before = attack_rate(clf, target, marked.features, marked.labels)
print(f"marked points flagged as members before removal: {before:.3f}")

# %%
# Patch the marked cluster out, then ask again.
criterion = CriterionSpec(LossKind.cross_entropy, remaining)
lissa = LissaConfig(recursion_depth=300, damping=0.01, scale=10.0,
                    repeats=1, batch_size=32, seed=5)
patched, _, _ = remove(target, train_set, mark.ids, criterion,
                       RemovalConfig(eta=0.025, l2=1e-4, pool_size=400, seed=2),
                       lissa)
after = attack_rate(clf, patched, marked.features, marked.labels)
print(f"after the removal patch: {after:.3f}")

# %%
# Retraining without the marked points is the reference: whatever rate the
# attack reports there is the floor set by generalization alone, since the
# retrained model never saw those points.
gold = retrain(train_set, mark.ids, spec, TrainConfig(60, 32, 0.1, shuffle_seed=3))
floor = attack_rate(clf, gold, marked.features, marked.labels)

print()
print(f"{'model':<22} {'attack rate':>12} {'remaining acc':>14}")
for label, m, rate in [("target (before)", target, before),
                       ("patched", patched, after),
                       ("retrained (floor)", gold, floor)]:
    print(f"{label:<22} {rate:>12.3f} {accuracy(m, remaining):>14.3f}")

# %%
# The patch drives the attack rate from near-certain membership down to
# the retraining floor while the model keeps its accuracy on everything
# it was allowed to remember.
