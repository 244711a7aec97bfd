import dataclasses

import pytest

from pumalab import config as C

FULL = """
[dataset]
kind = radial
n = 600
noise = 0.25
seed = 11
eval_n = 400
flip_fraction = 0.1

[model]
hidden = 64, 32
activation = relu
seed = 7

[train]
phases = 60:32:0.1, 40:600:0.05
shuffle_seed = 3

[mark]
scenario = ordered
fractions = 0.2, 0.4, 0.8
kmeans_k = 6

[removal]
methods = puma, retrain, sisa, amnesiac
eta = 0.025
l1 = 0.0
l2 = 1e-4
pool_size = 500
lambda_box = 1.0
sisa_shards = 4

[lissa]
depth = 300
damping = 0.01
scale = 10
repeats = 1
batch_size = 32
seed = 5

[attack]
shadows = 5
subset_fraction = 0.1
shadow_epochs = 50
attack_epochs = 100
shadow_seed = 13
net_seed = 17

[experiment]
delta = 0.05
repeats = 5
seed = 2

[sweep]
etas = 0.0, 0.01, 0.02

[calibration]
eta = 1e-4
k = 25
"""


def test_full_config_parses():
    cfg = C.loads(FULL)
    assert cfg.dataset.kind == "radial"
    assert cfg.dataset.n == 600 and cfg.dataset.eval_n == 400
    assert cfg.model.hidden == (64, 32)
    assert cfg.phases == ((60, 32, 0.1), (40, 600, 0.05))
    assert cfg.methods == ("puma", "retrain", "sisa", "amnesiac")
    assert cfg.scenario == "ordered"
    assert cfg.fractions == (0.2, 0.4, 0.8)
    assert cfg.removal.eta == 0.025 and cfg.removal.pool_size == 500
    assert cfg.lissa.recursion_depth == 300 and cfg.lissa.seed == 5
    assert cfg.attack.shadows == 5 and cfg.attack.net_seed == 17
    assert cfg.sisa_shards == 4
    assert cfg.repeats == 5 and cfg.seed == 2
    assert cfg.sweep_etas == (0.0, 0.01, 0.02)
    assert cfg.calibration_eta == 1e-4 and cfg.calibration_k == 25


def test_empty_config_uses_defaults():
    cfg = C.loads("")
    assert cfg.dataset.kind == "two_moons"
    assert cfg.methods == ("puma",)
    assert cfg.fractions == (0.2, 0.4, 0.6, 0.8)
    assert cfg.repeats == 5


def test_load_reads_file(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[experiment]\nseed = 9\n")
    assert C.load(p).seed == 9


def test_load_missing_file_is_config_error(tmp_path):
    with pytest.raises(C.ConfigError, match="cannot read"):
        C.load(tmp_path / "absent.ini")


def test_config_error_is_value_error():
    assert issubclass(C.ConfigError, ValueError)


@pytest.mark.parametrize("text,needle", [
    ("[bogus]\nx = 1\n", "unknown section"),
    ("[dataset]\nmystery = 1\n", "unknown keys"),
    ("[dataset]\nkind = hexagons\n", "kind must be one of"),
    ("[dataset]\nkind = csv\n", "requires a path"),
    ("[dataset]\nn = soon\n", "expected int"),
    ("[dataset]\nflip_fraction = 1.0\n", "flip_fraction"),
    ("[mark]\nfractions = 0.2, 0.2\n", "strictly increasing"),
    ("[mark]\nfractions = 0.5, 0.3\n", "strictly increasing"),
    ("[mark]\nfractions = 0.0, 0.5\n", "outside"),
    ("[mark]\nfractions = 0.5, 1.0\n", "outside"),
    ("[mark]\nfractions =\n", "must not be empty"),
    ("[mark]\nscenario = shuffled\n", "ordered or random"),
    ("[removal]\nmethods = puma, dropout\n", "unknown methods"),
    ("[removal]\nmethods =\n", "must not be empty"),
    ("[removal]\neta = 0.7\n", "cap"),
    ("[removal]\nsisa_shards = 0\n", "sisa_shards"),
    ("[train]\nphases = 60:32\n", "epochs:batch:lr"),
    ("[train]\nphases = a:b:c\n", "bad number"),
    ("[train]\nphases =\n", "must not be empty"),
    ("[model]\nhidden =\n", "nonempty"),
    ("[model]\nhidden = 64, zero\n", "expected ints"),
    ("[attack]\nshadows = 0\n", "shadows"),
    ("[attack]\nsubset_fraction = 0.2\n", "subset_fraction"),
    ("[experiment]\nrepeats = 0\n", "repeats"),
    ("[experiment]\ndelta = 0\n", "delta"),
    ("[calibration]\neta = 0.5\n", "calibration_eta"),
    ("[sweep]\netas = 0.1, wild\n", "expected floats"),
    ("no sections here", "bad config syntax"),
])
def test_bad_configs_rejected(text, needle):
    with pytest.raises(C.ConfigError, match=needle):
        C.loads(text)


def test_train_configs_step_shuffle_seed_per_phase():
    cfg = C.loads(FULL)
    tcs = cfg.train_configs()
    assert [t.shuffle_seed for t in tcs] == [3, 4]
    assert [t.epochs for t in tcs] == [60, 40]
    assert all(not t.record_ledger for t in tcs)
    shifted = cfg.train_configs(seed_offset=2, record_ledger=True)
    assert [t.shuffle_seed for t in shifted] == [5, 6]
    assert all(t.record_ledger for t in shifted)


def test_seed_override_via_replace():
    cfg = C.loads(FULL)
    assert dataclasses.replace(cfg, seed=41).seed == 41


def test_to_dict_covers_every_section():
    d = C.to_dict(C.loads(FULL))
    assert set(d) == set(C._KNOWN)
    assert d["mark"]["fractions"] == [0.2, 0.4, 0.8]
    assert d["train"]["phases"] == [[60, 32, 0.1], [40, 600, 0.05]]
    assert d["removal"]["methods"] == ["puma", "retrain", "sisa", "amnesiac"]


def test_to_dict_is_json_plain():
    import json
    json.dumps(C.to_dict(C.loads(FULL)))
