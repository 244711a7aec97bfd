# %% [markdown]
# Removal walkthrough
# ===================
#
# Train a small classifier on a ring dataset, mark one spatial cluster for
# removal, and compare two ways of getting rid of it: retraining from
# scratch without the marked points, and patching the trained parameters
# with a single influence-based update.

# %%
import numpy as np

from pumalab.data import MarkSpec, generate, mark_for_removal
from pumalab.model import LossKind, MlpSpec, TrainConfig, init_mlp, train
from pumalab.influence import CriterionSpec, LissaConfig
from pumalab.puma import RemovalConfig, remove
from pumalab.baselines import retrain
from pumalab.metrics import accuracy

train_set = generate("radial", 400, 0.25, seed=11)
holdout = generate("radial", 400, 0.25, seed=12)
print(f"training set: {train_set.n} points, {train_set.num_classes} classes")

# %%
# A two-hidden-layer net is plenty for this geometry.
spec = MlpSpec((2, 32, 16, 2), "relu", 7)
model, _ = train(init_mlp(spec), train_set, TrainConfig(60, 32, 0.1, shuffle_seed=3))
print(f"base accuracy  train {accuracy(model, train_set):.3f}"
      f"  holdout {accuracy(model, holdout):.3f}")

# %%
# Mark a quarter of the data. Marking is cluster-based: a k-means run picks
# spatial groups and whole clusters are claimed until the budget is filled,
# so the marked points are geometrically coherent, like one user's records.
mark = mark_for_removal(train_set, MarkSpec("ordered", 0.25, kmeans_k=5, seed=2))
remaining = train_set.drop(mark.ids, name="remaining")
marked = train_set.take(mark.ids, name="marked")
print(f"marked {len(mark.ids)} points (truncated cluster: {mark.truncated})")

# %%
# The patch needs three ingredients: a criterion (what performance means
# after removal: cross-entropy on the remaining points), an inverse-HVP
# solver configuration, and the patch step itself.
criterion = CriterionSpec(LossKind.cross_entropy, remaining)
lissa = LissaConfig(recursion_depth=300, damping=0.01, scale=10.0,
                    repeats=1, batch_size=32, seed=5)
rcfg = RemovalConfig(eta=0.02, l2=1e-4, pool_size=200, seed=2)

patched, solution, diag = remove(model, train_set, mark.ids, criterion,
                                 rcfg, lissa)
print(f"reweighting: {solution.nnz} of {len(solution.ids)} pool points active,"
      f" objective {solution.objective_value:.4f},"
      f" attainable={solution.attainable}")

# %%
# The patch is exactly theta + eta * (phi_marked - phi_pool). The
# diagnostics carry both phi vectors, so the identity can be audited
# against the returned model bit for bit.
audit = model.params.values + rcfg.eta * (diag.phi_mk.values - diag.phi_up.values)
print(f"patch identity holds: {np.array_equal(patched.params.values, audit)}")

# %%
# Retraining from scratch on the remaining points is the gold standard for
# removal but pays the full training bill again.
gold = retrain(train_set, mark.ids, spec, TrainConfig(60, 32, 0.1, shuffle_seed=3))

print()
print(f"{'model':<10} {'remaining':>10} {'marked':>8} {'holdout':>8}")
for label, m in [("base", model), ("patched", patched), ("retrain", gold)]:
    print(f"{label:<10} {accuracy(m, remaining):>10.3f}"
          f" {accuracy(m, marked):>8.3f} {accuracy(m, holdout):>8.3f}")

# %%
# The patched model keeps its accuracy on the remaining data. At this
# marking fraction every model still labels the marked region correctly,
# because the unmarked neighbors define the same ring; generalization is
# not the same thing as membership. Whether the marked points are actually
# forgotten is measured directly in 02_attack_walkthrough.py.
