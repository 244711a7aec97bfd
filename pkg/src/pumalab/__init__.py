"""pumalab: a machine-unlearning laboratory.

Influence-based PUMA data removal (lambda reweighting + linear parameter
patching), retrain/SISA/Amnesiac baselines, a shadow-model membership
attack harness, and influence-driven mislabel / calibration debugging,
all on small deterministic numpy networks.
"""

__version__ = "0.1.0"
