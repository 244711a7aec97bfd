import csv
import json

import pytest

from pumalab import cli
from pumalab import experiments as E
from pumalab.model import load_checkpoint

pytestmark = pytest.mark.filterwarnings("ignore:training gradient norm")

SMALL = """
[dataset]
kind = two_moons
n = 80
noise = 0.2
seed = 4

[model]
hidden = 8
seed = 2

[train]
phases = 20:16:0.1
shuffle_seed = 5

[mark]
scenario = random
fractions = 0.5

[removal]
methods = puma, retrain
eta = 0.02
pool_size = 40

[lissa]
depth = 40
damping = 0.01
scale = 10
repeats = 1
batch_size = 16
seed = 3

[attack]
shadows = 2
subset_fraction = 0.1
shadow_epochs = 15
attack_epochs = 20

[experiment]
repeats = 1
seed = 1

[sweep]
etas = 0.0, 0.02
"""


@pytest.fixture
def ini(tmp_path):
    p = tmp_path / "exp.ini"
    p.write_text(SMALL)
    return str(p)


def test_train_writes_checkpoint(ini, tmp_path, capsys):
    out = str(tmp_path / "model.json")
    assert cli.main(["train", "--config", ini, "--out", out]) == 0
    model = load_checkpoint(out)
    assert model.spec.layer_dims == (2, 8, 2)
    assert "accuracy" in capsys.readouterr().out


def test_remove_writes_report_and_summary(ini, tmp_path, capsys):
    out = str(tmp_path / "r.json")
    assert cli.main(["remove", "--config", ini, "--out", out]) == 0
    report = E.load_report(out)
    assert report.kind == "remove"
    assert len(report.cells) == 2  # methods x fractions x repeats
    text = capsys.readouterr().out
    assert "2 cells, 0 failed" in text
    assert "puma" in text and "retrain" in text


def test_attack_subcommand_fills_attack_rates(ini, tmp_path):
    out = str(tmp_path / "a.json")
    assert cli.main(["attack", "--config", ini, "--out", out]) == 0
    report = E.load_report(out)
    assert report.kind == "attack"
    assert all(c["attack_before"] is not None for c in report.cells)


def test_seed_override_lands_in_report(ini, tmp_path):
    out = str(tmp_path / "r.json")
    assert cli.main(["remove", "--config", ini, "--seed", "9",
                     "--out", out]) == 0
    assert E.load_report(out).config["experiment"]["seed"] == 9


def test_sweep_subcommand(ini, tmp_path):
    out = str(tmp_path / "s.json")
    assert cli.main(["sweep", "--config", ini, "--out", out]) == 0
    report = E.load_report(out)
    assert report.kind == "sweep"
    assert {c["eta"] for c in report.cells} == {0.0, 0.02}


def test_bench_subcommand(ini, tmp_path):
    out = str(tmp_path / "b.json")
    assert cli.main(["bench", "--config", ini, "--out", out]) == 0
    assert E.load_report(out).kind == "bench"


def test_report_summary_and_csv(ini, tmp_path, capsys):
    out = str(tmp_path / "r.json")
    cli.main(["remove", "--config", ini, "--out", out])
    capsys.readouterr()
    assert cli.main(["report", "--config", out]) == 0
    assert "kind=remove" in capsys.readouterr().out
    csv_out = str(tmp_path / "r.csv")
    assert cli.main(["report", "--config", out, "--out", csv_out]) == 0
    with open(csv_out, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2


def test_missing_config_is_exit_1(tmp_path, capsys):
    assert cli.main(["remove", "--config",
                     str(tmp_path / "absent.ini")]) == 1
    assert "config error" in capsys.readouterr().err


def test_config_flag_required(capsys):
    assert cli.main(["remove"]) == 1
    assert "needs --config" in capsys.readouterr().err


def test_invalid_config_is_exit_1(tmp_path, capsys):
    p = tmp_path / "bad.ini"
    p.write_text("[dataset]\nkind = hexagons\n")
    assert cli.main(["remove", "--config", str(p)]) == 1


def test_empty_sweep_grid_is_exit_1(tmp_path, capsys):
    p = tmp_path / "nosweep.ini"
    p.write_text(SMALL.replace("[sweep]\netas = 0.0, 0.02", ""))
    assert cli.main(["sweep", "--config", str(p)]) == 1
    assert "nonempty" in capsys.readouterr().err


def test_partial_failure_is_exit_2(tmp_path, capsys):
    p = tmp_path / "partial.ini"
    p.write_text(SMALL.replace("methods = puma, retrain",
                               "methods = puma, sisa")
                 .replace("phases = 20:16:0.1",
                          "phases = 10:16:0.1, 10:16:0.1"))
    out = str(tmp_path / "r.json")
    assert cli.main(["remove", "--config", str(p), "--out", out]) == 2
    report = E.load_report(out)
    assert len(report.failed_cells()) == 1
    assert "failed cell" in capsys.readouterr().err


def test_total_failure_is_exit_3(tmp_path, capsys):
    p = tmp_path / "doomed.ini"
    p.write_text(SMALL.replace("subset_fraction = 0.1",
                               "subset_fraction = 0.001"))
    out = str(tmp_path / "r.json")
    assert cli.main(["attack", "--config", str(p), "--out", out]) == 3
    assert all(c["status"] == "failed" for c in E.load_report(out).cells)


def test_bad_report_input_is_exit_1(tmp_path, capsys):
    p = tmp_path / "notjson.json"
    p.write_text("{}")
    assert cli.main(["report", "--config", str(p)]) == 1
    assert "cannot read report" in capsys.readouterr().err


def test_calibrate_subcommand(tmp_path):
    p = tmp_path / "cal.ini"
    p.write_text(SMALL.replace("seed = 4", "seed = 7")
                 .replace("[mark]", "[calibration]\neta = 1e-4\n\n[mark]")
                 .replace("kind = two_moons",
                          "kind = two_moons\nflip_fraction = 0.1"))
    out = str(tmp_path / "c.json")
    assert cli.main(["calibrate", "--config", str(p), "--out", out]) == 0
    report = E.load_report(out)
    assert report.kind == "calibrate"
    assert report.cells[0]["ece_before"] is not None


def test_debug_subcommand(tmp_path):
    p = tmp_path / "dbg.ini"
    p.write_text(SMALL.replace("kind = two_moons",
                               "kind = two_moons\nflip_fraction = 0.1"))
    out = str(tmp_path / "d.json")
    assert cli.main(["debug", "--config", str(p), "--out", out]) == 0
    report = E.load_report(out)
    assert report.kind == "debug"
    assert report.cells[0]["flip_count"] == 8
