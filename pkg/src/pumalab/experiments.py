"""Experiment drivers that turn a config into a run report.

A report is a flat list of cells, one per configured unit of work
(method x fraction x repeat for removal runs, repeat for the debugging
runs, eta x repeat for sweeps). A cell that blows up is recorded as
failed with the error string instead of aborting the run, so a report
always accounts for every configured cell.

Reports are reproducible: all randomness is derived from config seeds,
and every wall-clock field ends in ``_ms`` so two runs of the same
config can be compared after ``strip_timings``.
"""

import csv as _csv
import dataclasses
import json
import platform
import time

import numpy as np

from . import __version__, baselines, data
from . import influence as infl
from . import metrics, puma
from .attack import build_attack_dataset, train_attack, train_shadows
from .attack import attack_rate as _attack_rate
from .config import ConfigError, to_dict
from .model import (AmnesiacLedger, LossKind, MlpSpec, TrainConfig, init_mlp,
                    train)

SCHEMA_VERSION = "pumalab-report-v1"


def environment_fingerprint():
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "platform": platform.platform(),
        "package": __version__,
    }


@dataclasses.dataclass
class RunReport:
    kind: str
    config: dict
    environment: dict
    cells: list
    schema_version: str = SCHEMA_VERSION
    elapsed_ms: float = 0.0

    def to_json(self):
        payload = {
            "kind": self.kind,
            "schema_version": self.schema_version,
            "config": self.config,
            "environment": self.environment,
            "cells": self.cells,
            "elapsed_ms": self.elapsed_ms,
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @staticmethod
    def from_json(text):
        payload = json.loads(text)
        version = payload.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema {version!r}; "
                             f"this build reads {SCHEMA_VERSION}")
        return RunReport(kind=payload["kind"], config=payload["config"],
                         environment=payload["environment"],
                         cells=payload["cells"],
                         schema_version=version,
                         elapsed_ms=payload.get("elapsed_ms", 0.0))

    def failed_cells(self):
        return [c for c in self.cells if c.get("status") != "ok"]


def strip_timings(obj):
    """Copy of a report dict/list with every key ending in _ms removed."""
    if isinstance(obj, dict):
        return {k: strip_timings(v) for k, v in obj.items()
                if not k.endswith("_ms")}
    if isinstance(obj, list):
        return [strip_timings(v) for v in obj]
    return obj


def _plain(obj):
    """Recursively coerce numpy scalars/arrays so json round-trips."""
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    return obj


# ---------------------------------------------------------------------------
# shared builders


def build_datasets(config):
    """(train_set, held_out_set) for a config. Generated datasets draw the
    held-out set from the same distribution under a derived seed; CSV
    datasets are split 75/25."""
    d = config.dataset
    if d.kind == "csv":
        full = data.load_csv(d.path, d.label_column)
        return data.split(full, 0.25, seed=d.seed)
    train_set = data.generate(d.kind, d.n, d.noise, d.seed)
    eval_n = d.eval_n or d.n
    test_seed = int(np.random.SeedSequence((d.seed, 0x7E57)).generate_state(1)[0])
    return train_set, data.generate(d.kind, eval_n, d.noise, test_seed)


def model_spec_for(config, dataset, seed_offset=0):
    dims = (dataset.dim, *config.model.hidden, dataset.num_classes)
    return MlpSpec(dims, config.model.activation, config.model.seed + seed_offset)


def train_schedule(model, dataset, configs, group_ids=None):
    """Run the training phases in order. Returns (model, ledger or None);
    ledgers from consecutive phases chain exactly, so the merged ledger
    replays to the final parameters bitwise."""
    ledgers = []
    for tc in configs:
        model, led = train(model, dataset, tc, group_ids=group_ids)
        if led is not None:
            ledgers.append(led)
    if not ledgers:
        return model, None
    merged = AmnesiacLedger(
        entries=[e for led in ledgers for e in led.entries],
        initial_params=ledgers[0].initial_params,
        final_fingerprint=ledgers[-1].final_fingerprint)
    return model, merged


def _single_phase(config):
    if len(config.phases) != 1:
        raise ValueError("this method supports a single training phase only")
    return config.train_configs()[0]


def _attack_classifier(config, train_set, spec, repeat):
    a = config.attack
    subset = int(a.subset_fraction * train_set.n)
    shadows = train_shadows(train_set, spec, count=a.shadows,
                            subset_fraction=a.subset_fraction,
                            epochs=a.shadow_epochs, seed=a.shadow_seed + repeat,
                            batch_size=min(32, max(1, subset)))
    attack_set = build_attack_dataset(shadows)
    tc = TrainConfig(a.attack_epochs, 32, 0.1, shuffle_seed=a.net_seed + repeat)
    return train_attack(attack_set, tc, seed=a.net_seed + repeat)


def _removal_cell_skeleton(method, fraction, repeat, config):
    return {
        "method": method, "fraction": fraction, "repeat": repeat,
        "scenario": config.scenario, "status": "ok", "error": None,
        "marked_count": None, "truncated": None,
        "accuracy_before": None, "accuracy_after": None,
        "marked_accuracy_before": None, "marked_accuracy_after": None,
        "attack_before": None, "attack_after": None,
        "remove_ms": None, "lambda_objective": None, "lambda_nnz": None,
        "lambda_attainable": None, "retrained_shards": None,
        "shards_remaining": None, "batches_subtracted": None,
    }


def _fill_removal_cell(cell, method, config, repeat, base_model, train_set,
                       test_set, spec, mark, classifier):
    marked_view = train_set.take(mark.ids)
    rcfg = dataclasses.replace(config.removal, seed=config.seed + repeat)

    if method == "puma":
        before = base_model
        remaining = train_set.drop(mark.ids)
        criterion = infl.CriterionSpec(LossKind.cross_entropy, remaining)
        (out, ms) = metrics.timed(lambda: puma.remove(
            base_model, train_set, mark.ids, criterion, rcfg, config.lissa))
        after, solution, _ = out
        cell["lambda_objective"] = solution.objective_value
        cell["lambda_nnz"] = solution.nnz
        cell["lambda_attainable"] = solution.attainable
    elif method == "retrain":
        before = base_model
        if len(config.phases) == 1:
            (after, ms) = metrics.timed(lambda: baselines.retrain(
                train_set, mark.ids, spec, _single_phase(config)))
        else:
            remaining = train_set.drop(mark.ids)
            (after, ms) = metrics.timed(lambda: train_schedule(
                init_mlp(spec), remaining, config.train_configs())[0])
    elif method == "sisa":
        ensemble = baselines.sisa_train(train_set, config.sisa_shards, spec,
                                        _single_phase(config),
                                        seed=config.seed + repeat)
        before = ensemble
        (out, ms) = metrics.timed(
            lambda: baselines.sisa_remove(ensemble, mark.ids))
        after, retrained = out
        cell["retrained_shards"] = len(retrained)
        cell["shards_remaining"] = len(after.shards)
    elif method == "amnesiac":
        group = mark.ids if config.scenario == "ordered" else None
        before, ledger = train_schedule(
            init_mlp(spec), train_set,
            config.train_configs(record_ledger=True), group_ids=group)
        marked = set(int(i) for i in mark.ids)
        cell["batches_subtracted"] = sum(
            1 for e in ledger.entries
            if marked.intersection(int(i) for i in e.member_ids))
        (after, ms) = metrics.timed(
            lambda: baselines.amnesiac_remove(before, ledger, mark.ids))
    else:
        raise ValueError(f"unknown method {method!r}")

    cell["remove_ms"] = ms
    cell["accuracy_before"] = metrics.accuracy(before, test_set)
    cell["accuracy_after"] = metrics.accuracy(after, test_set)
    cell["marked_accuracy_before"] = metrics.accuracy(before, marked_view)
    cell["marked_accuracy_after"] = metrics.accuracy(after, marked_view)
    if classifier is not None:
        cell["attack_before"] = _attack_rate(classifier, before,
                                             marked_view.features,
                                             marked_view.labels)
        cell["attack_after"] = _attack_rate(classifier, after,
                                            marked_view.features,
                                            marked_view.labels)


def run_removal_experiment(config, include_attack=True, kind="remove"):
    """One cell per (method, fraction, repeat). The base model is trained
    once; marking and attack seeds step by repeat."""
    t0 = time.perf_counter()
    train_set, test_set = build_datasets(config)
    spec = model_spec_for(config, train_set)
    base_model, _ = train_schedule(init_mlp(spec), train_set,
                                   config.train_configs())
    cells = []
    for r in range(config.repeats):
        classifier = attack_error = None
        if include_attack:
            try:
                classifier = _attack_classifier(config, train_set, spec, r)
            except Exception as exc:
                attack_error = f"{type(exc).__name__}: {exc}"
        for fraction in config.fractions:
            mark = data.mark_for_removal(train_set, data.MarkSpec(
                config.scenario, fraction, config.kmeans_k,
                seed=config.seed + r))
            for method in config.methods:
                cell = _removal_cell_skeleton(method, fraction, r, config)
                cell["marked_count"] = len(mark.ids)
                cell["truncated"] = mark.truncated
                try:
                    if include_attack and classifier is None:
                        raise RuntimeError(
                            f"attack classifier unavailable: {attack_error}")
                    _fill_removal_cell(cell, method, config, r, base_model,
                                       train_set, test_set, spec, mark,
                                       classifier)
                except Exception as exc:
                    cell["status"] = "failed"
                    cell["error"] = f"{type(exc).__name__}: {exc}"
                cells.append(_plain(cell))
    return RunReport(kind=kind, config=to_dict(config),
                     environment=environment_fingerprint(), cells=cells,
                     elapsed_ms=(time.perf_counter() - t0) * 1000.0)


def run_bench(config):
    """Removal timing comparison at the first configured fraction only;
    remove_ms for each method covers just the removal call."""
    slim = dataclasses.replace(config, fractions=(config.fractions[0],))
    report = run_removal_experiment(slim, include_attack=False, kind="bench")
    return report


# ---------------------------------------------------------------------------
# mislabel debugging


def _curve_pairs(curve):
    return [[f, rec] for f, rec in zip(curve.fractions, curve.recalls)]


def run_debug_experiment(config, foil_points=20):
    """Per repeat: train on a (possibly corrupted) draw, rank suspects by
    upweighting influence against a held-out clean criterion, and compare
    with the plain gradient-alignment ranking.

    The timing foil recomputes the same influence scores with one inverse
    solve per point instead of one shared cached solve; it runs on the
    first ``foil_points`` points only, which is already enough to settle
    the wall-clock ordering.
    """
    t0 = time.perf_counter()
    d = config.dataset
    if d.kind == "csv":
        raise ConfigError("debug experiment needs a generated dataset")
    cells = []
    for r in range(config.repeats):
        cell = {
            "repeat": r, "status": "ok", "error": None, "flip_count": 0,
            "suspect_count": None, "suspect_ids": None,
            "suspect_precision": None, "suspect_recall": None,
            "psi_curve": None, "ntk_curve": None, "uniform_curve": None,
            "psi_recall_20": None, "ntk_recall_20": None,
            "psi_dominates_uniform": None,
            "psi_ms": None, "ntk_ms": None, "foil_ms": None,
            "foil_points": None,
        }
        try:
            base = data.generate(d.kind, d.n, d.noise, d.seed + 100 * r)
            if d.flip_fraction > 0:
                train_set, flipped = data.flip_labels(
                    base, d.flip_fraction, d.seed + 1 + 100 * r)
            else:
                train_set, flipped = base, frozenset()
            eval_clean = data.generate(d.kind, d.eval_n or d.n, d.noise,
                                       d.seed + 2 + 100 * r)
            spec = model_spec_for(config, train_set, seed_offset=r)
            model, _ = train_schedule(init_mlp(spec), train_set,
                                      config.train_configs(seed_offset=r))
            criterion = infl.CriterionSpec(LossKind.cross_entropy, eval_clean)
            lcfg = dataclasses.replace(config.lissa,
                                       seed=config.lissa.seed + r)
            cell["flip_count"] = len(flipped)

            def psi_ranking():
                cache = infl.build_cache(model, train_set, criterion, lcfg)
                scores = infl.psi_scores(cache, model, train_set)
                return [i for _, i in sorted((s.psi, s.id) for s in scores)]

            def ntk_ranking():
                g = infl.criterion_grad(model, criterion)
                scores = infl.ntk_scores(model, g, train_set)
                return [i for _, i in sorted((s.psi, s.id) for s in scores)]

            psi_rank, cell["psi_ms"] = metrics.timed(psi_ranking)
            ntk_rank, cell["ntk_ms"] = metrics.timed(ntk_ranking)

            take = min(foil_points, train_set.n)
            g_crit = infl.criterion_grad(model, criterion)

            def foil():
                from .model import per_sample_grad
                out = []
                for row in range(take):
                    gi = per_sample_grad(model, train_set.features[row],
                                         train_set.labels[row])
                    ihvp = infl.inverse_hvp(model, train_set, gi, lcfg,
                                            check_stationarity=False)
                    out.append(float(g_crit.values @ ihvp.values))
                return out

            _, cell["foil_ms"] = metrics.timed(foil)
            cell["foil_points"] = take

            k = config.calibration_k or max(1, train_set.n // 10)
            report = puma.debug_mislabels(model, train_set, criterion, k, lcfg)
            suspects = sorted(int(i) for i in report.suspects)
            cell["suspect_count"] = len(suspects)
            cell["suspect_ids"] = suspects
            if suspects and flipped:
                hits = len(set(suspects) & flipped)
                cell["suspect_precision"] = hits / len(suspects)
                cell["suspect_recall"] = hits / len(flipped)

            if flipped:
                pc = metrics.discovery_curve(psi_rank, flipped)
                nc = metrics.discovery_curve(ntk_rank, flipped)
                cell["psi_curve"] = _curve_pairs(pc)
                cell["ntk_curve"] = _curve_pairs(nc)
                cell["uniform_curve"] = [[f, f] for f in pc.fractions]
                cell["psi_recall_20"] = pc.recall_at(0.2)
                cell["ntk_recall_20"] = nc.recall_at(0.2)
                cell["psi_dominates_uniform"] = bool(all(
                    rec >= f - 1e-9 for f, rec in zip(pc.fractions, pc.recalls)))
        except Exception as exc:
            cell["status"] = "failed"
            cell["error"] = f"{type(exc).__name__}: {exc}"
        cells.append(_plain(cell))
    return RunReport(kind="debug", config=to_dict(config),
                     environment=environment_fingerprint(), cells=cells,
                     elapsed_ms=(time.perf_counter() - t0) * 1000.0)


def run_calibration_experiment(config):
    """Per repeat: train on a corrupted draw, apply the small-step
    calibration patch, and score binned calibration error before and
    after on a held-out draw corrupted the same way."""
    t0 = time.perf_counter()
    d = config.dataset
    if d.kind == "csv":
        raise ConfigError("calibration experiment needs a generated dataset")
    if d.flip_fraction <= 0:
        raise ConfigError("calibration experiment requires flip_fraction > 0")
    cells = []
    for r in range(config.repeats):
        cell = {
            "repeat": r, "status": "ok", "error": None, "flip_count": 0,
            "ece_before": None, "ece_after": None, "improved": None,
            "accuracy_before": None, "accuracy_after": None,
            "patch_ms": None,
        }
        try:
            base = data.generate(d.kind, d.n, d.noise, d.seed + 100 * r)
            train_set, flipped = data.flip_labels(base, d.flip_fraction,
                                                  d.seed + 1 + 100 * r)
            ev_base = data.generate(d.kind, d.eval_n or d.n, d.noise,
                                    d.seed + 2 + 100 * r)
            ev_corr, _ = data.flip_labels(ev_base, d.flip_fraction,
                                          d.seed + 3 + 100 * r)
            spec = model_spec_for(config, train_set, seed_offset=r)
            model, _ = train_schedule(init_mlp(spec), train_set,
                                      config.train_configs(seed_offset=r))
            lcfg = dataclasses.replace(config.lissa,
                                       seed=config.lissa.seed + r)
            cell["flip_count"] = len(flipped)
            cell["ece_before"] = metrics.ece(model, ev_corr).ece
            cell["accuracy_before"] = metrics.accuracy(model, ev_corr)
            k = config.calibration_k or None
            patched, cell["patch_ms"] = metrics.timed(
                lambda: puma.calibration_patch(model, train_set, lcfg,
                                               eta=config.calibration_eta,
                                               k=k))
            cell["ece_after"] = metrics.ece(patched, ev_corr).ece
            cell["accuracy_after"] = metrics.accuracy(patched, ev_corr)
            cell["improved"] = cell["ece_after"] < cell["ece_before"]
        except Exception as exc:
            cell["status"] = "failed"
            cell["error"] = f"{type(exc).__name__}: {exc}"
        cells.append(_plain(cell))
    return RunReport(kind="calibrate", config=to_dict(config),
                     environment=environment_fingerprint(), cells=cells,
                     elapsed_ms=(time.perf_counter() - t0) * 1000.0)


# ---------------------------------------------------------------------------
# eta sweep


def run_eta_sweep(config, eta_grid=None):
    """Patch strength sweep at the largest configured marking fraction.
    One cell per (eta, repeat); eta = 0 must leave the parameters
    bit-identical, which each cell records as ``identity``."""
    t0 = time.perf_counter()
    grid = config.sweep_etas if eta_grid is None else tuple(eta_grid)
    if not grid:
        raise ConfigError("eta sweep needs a nonempty grid "
                          "([sweep] etas or an explicit grid)")
    try:
        sweep_cfgs = {eta: dataclasses.replace(config.removal, eta=float(eta))
                      for eta in grid}
    except ValueError as exc:
        raise ConfigError(f"bad eta in sweep grid: {exc}") from None

    train_set, test_set = build_datasets(config)
    spec = model_spec_for(config, train_set)
    base_model, _ = train_schedule(init_mlp(spec), train_set,
                                   config.train_configs())
    fraction = config.fractions[-1]
    cells = []
    for r in range(config.repeats):
        classifier = attack_error = None
        try:
            classifier = _attack_classifier(config, train_set, spec, r)
        except Exception as exc:
            attack_error = f"{type(exc).__name__}: {exc}"
        mark = data.mark_for_removal(train_set, data.MarkSpec(
            config.scenario, fraction, config.kmeans_k, seed=config.seed + r))
        marked_view = train_set.take(mark.ids)
        remaining = train_set.drop(mark.ids)
        criterion = infl.CriterionSpec(LossKind.cross_entropy, remaining)
        for eta in grid:
            cell = {
                "eta": float(eta), "repeat": r, "fraction": fraction,
                "status": "ok", "error": None,
                "marked_count": len(mark.ids),
                "accuracy_before": None, "accuracy_after": None,
                "attack_before": None, "attack_after": None,
                "marked_accuracy_after": None, "identity": None,
                "remove_ms": None,
            }
            try:
                if classifier is None:
                    raise RuntimeError(
                        f"attack classifier unavailable: {attack_error}")
                rcfg = dataclasses.replace(sweep_cfgs[eta],
                                           seed=config.seed + r)
                out, cell["remove_ms"] = metrics.timed(
                    lambda: puma.remove(base_model, train_set, mark.ids,
                                        criterion, rcfg, config.lissa))
                patched = out[0]
                cell["accuracy_before"] = metrics.accuracy(base_model, test_set)
                cell["accuracy_after"] = metrics.accuracy(patched, test_set)
                cell["attack_before"] = _attack_rate(classifier, base_model,
                                                     marked_view.features,
                                                     marked_view.labels)
                cell["attack_after"] = _attack_rate(classifier, patched,
                                                    marked_view.features,
                                                    marked_view.labels)
                cell["marked_accuracy_after"] = metrics.accuracy(patched,
                                                                 marked_view)
                cell["identity"] = bool(np.array_equal(
                    patched.params.values, base_model.params.values))
            except Exception as exc:
                cell["status"] = "failed"
                cell["error"] = f"{type(exc).__name__}: {exc}"
            cells.append(_plain(cell))
    return RunReport(kind="sweep", config=to_dict(config),
                     environment=environment_fingerprint(), cells=cells,
                     elapsed_ms=(time.perf_counter() - t0) * 1000.0)


# ---------------------------------------------------------------------------
# report output


def emit_report(report, path, fmt="json"):
    """Write a report as canonical JSON or flat CSV (one row per cell;
    list values are embedded as JSON strings)."""
    if fmt == "json":
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(report.to_json())
            fh.write("\n")
        return
    if fmt != "csv":
        raise ValueError(f"unknown report format {fmt!r}")
    keys = sorted({k for cell in report.cells for k in cell})
    fields = ["kind", "schema_version"] + keys
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = _csv.DictWriter(fh, fieldnames=fields, restval="")
        writer.writeheader()
        for cell in report.cells:
            row = {"kind": report.kind, "schema_version": report.schema_version}
            for k in keys:
                v = cell.get(k)
                if isinstance(v, (list, dict)):
                    v = json.dumps(v, sort_keys=True)
                row[k] = "" if v is None else v
            writer.writerow(row)


def load_report(path):
    with open(path, encoding="utf-8") as fh:
        return RunReport.from_json(fh.read())
