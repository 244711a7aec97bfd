"""Influence-machinery oracles.

The expensive ground truths are shared per module: a dense damped-Hessian
solve on a 4-parameter convex model, and leave-one-out retraining of the
same model, which independently measures what each score claims to
predict."""

import warnings

import numpy as np
import pytest
from scipy.stats import spearmanr

from pumalab import data
from pumalab import influence as I
from pumalab.model import (
    LossKind,
    MlpModel,
    MlpSpec,
    ParamVector,
    TrainConfig,
    forward,
    hvp,
    init_mlp,
    layout_for,
    mean_grad,
    per_sample_grad,
    train,
)

FULL = 40  # training-set size of the convex fixture


def _dense_hessian(model, dset):
    p = len(model.params)
    H = np.zeros((p, p))
    for i in range(p):
        e = np.zeros(p)
        e[i] = 1.0
        H[:, i] = hvp(model, dset, ParamVector(e, model.params.layout)).values
    return 0.5 * (H + H.T)


def _loss_on(model, dset):
    P = forward(model, dset.features)
    return float(-np.log(P[np.arange(dset.n), dset.labels]).mean())


def _pt_loss(model, pt):
    return float(-np.log(forward(model, pt[0])[pt[1]]))


@pytest.fixture(scope="module")
def convex():
    """1-input softmax regression on a line of points, one far point with
    a flipped label, plus leave-one-out ground truth for every point."""
    rng = np.random.Generator(np.random.Philox(42))
    X = np.sort(rng.uniform(-2.0, 2.0, size=FULL))[:, None]
    y = (X[:, 0] > 0).astype(int)
    out_row = int(np.argmin(X[:, 0]))
    y[out_row] = 1
    ds = data.Dataset(X, y, np.arange(FULL, dtype=np.uint64), "line", num_classes=2)

    Xe = rng.uniform(-2.0, 2.0, size=60)[:, None]
    ye = (Xe[:, 0] > 0).astype(int)
    ev = data.Dataset(Xe, ye, np.arange(60, dtype=np.uint64), "line-eval",
                      num_classes=2)

    m0 = init_mlp(MlpSpec((1, 2), seed=5))
    tc = TrainConfig(epochs=1200, batch_size=FULL, learning_rate=0.5, shuffle_seed=0)
    model, _ = train(m0, ds, tc)

    criterion = I.CriterionSpec(LossKind.cross_entropy, ev)
    cache = I.build_cache(model, ds, criterion,
                          I.LissaConfig(1500, 0.01, 5.0, repeats=1,
                                        batch_size=FULL, seed=7))

    test_pt = (np.array([0.3]), 1)
    C_full = _loss_on(model, ev)
    T_full = _pt_loss(model, test_pt)
    loo_crit, loo_drop = {}, {}
    for j in range(FULL):
        mj, _ = train(m0, ds.drop({j}),
                      TrainConfig(epochs=1200, batch_size=FULL - 1,
                                  learning_rate=0.5, shuffle_seed=0))
        loo_crit[j] = _loss_on(mj, ev) - C_full
        loo_drop[j] = T_full - _pt_loss(mj, test_pt)

    return {
        "ds": ds, "ev": ev, "m0": m0, "model": model, "out_row": out_row,
        "criterion": criterion, "cache": cache, "H": _dense_hessian(model, ds),
        "test_pt": test_pt, "loo_crit": loo_crit, "loo_drop": loo_drop,
    }


@pytest.fixture(scope="module")
def noisy():
    """Same architecture with 20% flipped labels: the soft optimum keeps
    the nonzero curvature well above the damping, for the round trip."""
    rng = np.random.Generator(np.random.Philox(17))
    X = np.sort(rng.uniform(-2.0, 2.0, size=FULL))[:, None]
    y = (X[:, 0] > 0).astype(int)
    y[::5] = 1 - y[::5]
    ds = data.Dataset(X, y, np.arange(FULL, dtype=np.uint64), "noisy", num_classes=2)
    m0 = init_mlp(MlpSpec((1, 2), seed=5))
    model, _ = train(m0, ds, TrainConfig(epochs=1500, batch_size=FULL,
                                         learning_rate=0.5, shuffle_seed=0))
    return {"ds": ds, "model": model}


# ---------------------------------------------------------------------------
# criterion gradients


def test_criterion_grad_on_train_set_is_mean_grad(convex):
    g = I.criterion_grad(convex["model"],
                         I.CriterionSpec(LossKind.cross_entropy, convex["ds"]))
    assert np.abs(g.values - mean_grad(convex["model"], convex["ds"]).values).max() < 1e-12


def test_criterion_grad_single_sample(convex):
    ev = convex["ev"]
    one = ev.take({int(ev.ids[0])})
    g = I.criterion_grad(convex["model"],
                         I.CriterionSpec(LossKind.cross_entropy, one))
    gp = per_sample_grad(convex["model"], one.features[0], one.labels[0])
    assert np.abs(g.values - gp.values).max() < 1e-12


def test_criterion_grad_vanishes_for_confident_correct_model():
    # margin large enough that the true-class probability rounds to 1.0,
    # so the calibration surrogate sits exactly at its minimum
    spec = MlpSpec((1, 2))
    pv = ParamVector(np.array([1000.0, -1000.0, 0.0, 0.0]), layout_for(spec))
    m = MlpModel(spec, pv)
    X = np.array([[1.0], [-1.0]])
    ds = data.Dataset(X, np.array([0, 1]), np.arange(2, dtype=np.uint64),
                      "sep", num_classes=2)
    g = I.criterion_grad(m, I.CriterionSpec(LossKind.calibration_surrogate, ds))
    assert g.norm() < 1e-6


def test_criterion_grad_rejects_empty_eval_set(convex):
    empty = convex["ev"].drop(set(int(i) for i in convex["ev"].ids))
    with pytest.raises(ValueError):
        I.criterion_grad(convex["model"],
                         I.CriterionSpec(LossKind.cross_entropy, empty))


# ---------------------------------------------------------------------------
# inverse HVP


def test_inverse_hvp_zero_vector(convex):
    out = I.inverse_hvp(convex["model"], convex["ds"],
                        ParamVector.zeros(convex["model"].params.layout),
                        I.LissaConfig(seed=1))
    assert np.all(out.values == 0.0)


def test_inverse_hvp_matches_dense_solve(convex):
    # stochastic minibatch estimator vs a direct damped-Hessian solve
    rng = np.random.Generator(np.random.Philox(3))
    v = ParamVector(rng.normal(size=4), convex["model"].params.layout)
    damping = 0.05
    want = np.linalg.solve(convex["H"] + damping * np.eye(4), v.values)
    cfg = I.LissaConfig(1500, damping, 5.0, repeats=4, batch_size=20, seed=9)
    got = I.inverse_hvp(convex["model"], convex["ds"], v, cfg).values
    assert np.linalg.norm(got - want) / np.linalg.norm(want) < 5e-2


def test_inverse_hvp_round_trip(noisy):
    # v is drawn from the range of H so the exact null direction of the
    # softmax head (uniform final-bias shift) cannot hide error
    m, ds = noisy["model"], noisy["ds"]
    rng = np.random.Generator(np.random.Philox(8))
    u = ParamVector(rng.normal(size=4), m.params.layout)
    v = hvp(m, ds, u)
    cfg = I.LissaConfig(3000, 0.01, 10.0, repeats=1, batch_size=ds.n, seed=3)
    back = hvp(m, ds, I.inverse_hvp(m, ds, v, cfg))
    assert np.linalg.norm(back.values - v.values) / v.norm() < 1e-1


def test_inverse_hvp_is_seed_deterministic(convex):
    rng = np.random.Generator(np.random.Philox(4))
    v = ParamVector(rng.normal(size=4), convex["model"].params.layout)
    cfg = I.LissaConfig(80, 0.05, 5.0, repeats=2, batch_size=16, seed=21)
    a = I.inverse_hvp(convex["model"], convex["ds"], v, cfg).values
    b = I.inverse_hvp(convex["model"], convex["ds"], v, cfg).values
    assert np.array_equal(a, b)
    other = I.LissaConfig(80, 0.05, 5.0, repeats=2, batch_size=16, seed=22)
    c = I.inverse_hvp(convex["model"], convex["ds"], v, other).values
    assert not np.array_equal(a, c)


def test_inverse_hvp_divergence_error_names_knobs(convex):
    rng = np.random.Generator(np.random.Philox(5))
    v = ParamVector(rng.normal(size=4), convex["model"].params.layout)
    bad = I.LissaConfig(100, 0.05, 0.05, repeats=1, batch_size=FULL, seed=1)
    with pytest.raises(I.LissaDivergence, match="scale"):
        I.inverse_hvp(convex["model"], convex["ds"], v, bad)


def test_inverse_hvp_warns_far_from_stationary(convex):
    rng = np.random.Generator(np.random.Philox(6))
    v = ParamVector(rng.normal(size=4), convex["model"].params.layout)
    cfg = I.LissaConfig(5, 0.01, 10.0, repeats=1, batch_size=FULL, seed=1)
    with pytest.warns(UserWarning, match="stationary"):
        I.inverse_hvp(convex["m0"], convex["ds"], v, cfg)


def test_spectral_check_warns_only_when_scale_too_small(convex):
    small = I.LissaConfig(10, 0.01, 0.05, repeats=1, batch_size=FULL, seed=1)
    with pytest.warns(UserWarning, match="scale"):
        I.spectral_check(convex["model"], convex["ds"], small)
    ok = I.LissaConfig(10, 0.01, 10.0, repeats=1, batch_size=FULL, seed=1)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        est = I.spectral_check(convex["model"], convex["ds"], ok)
    top = float(np.abs(np.linalg.eigvalsh(convex["H"])).max()) + 0.01
    assert est == pytest.approx(top, rel=1e-3)


def test_lissa_config_validation():
    with pytest.raises(ValueError):
        I.LissaConfig(recursion_depth=0)
    with pytest.raises(ValueError):
        I.LissaConfig(damping=-0.1)
    with pytest.raises(ValueError):
        I.LissaConfig(scale=0.0)


# ---------------------------------------------------------------------------
# psi scores


def test_psi_zero_cache_vector(convex):
    cache = I.IhvpCache(
        vector=ParamVector.zeros(convex["model"].params.layout),
        criterion_loss="cross_entropy", eval_name="x", eval_hash="y",
        config_fingerprint="z",
        model_fingerprint=convex["model"].params.fingerprint(),
    )
    scores = I.psi_scores(cache, convex["model"], convex["ds"])
    assert all(s.psi == 0.0 for s in scores)


def test_psi_duplicated_sample_scores_identically(convex):
    ds = convex["ds"]
    dup = data.Dataset(
        np.vstack([ds.features[:1], ds.features[:1]]),
        np.array([ds.labels[0], ds.labels[0]]),
        np.array([100, 101], dtype=np.uint64), "dup", num_classes=2)
    scores = I.psi_scores(convex["cache"], convex["model"], dup)
    assert scores[0].psi == scores[1].psi


def test_psi_is_permutation_invariant(convex):
    ds = convex["ds"]
    perm = np.random.Generator(np.random.Philox(9)).permutation(ds.n)
    shuffled = data.Dataset(ds.features[perm], ds.labels[perm], ds.ids[perm],
                            "shuffled", num_classes=2)
    a = {s.id: s.psi for s in I.psi_scores(convex["cache"], convex["model"], ds)}
    b = {s.id: s.psi for s in I.psi_scores(convex["cache"], convex["model"], shuffled)}
    assert a == b


def test_psi_additivity_over_marked_set(convex):
    ds, cache, model = convex["ds"], convex["cache"], convex["model"]
    rows = [1, 4, 7, 20]
    grads = [per_sample_grad(model, ds.features[r], ds.labels[r]) for r in rows]
    summed = grads[0]
    for g in grads[1:]:
        summed = summed + g
    combined = cache.vector.dot(summed)
    individual = sum(cache.vector.dot(g) for g in grads)
    assert abs(combined - individual) < 1e-10


def test_psi_refuses_stale_cache(convex):
    other, _ = train(convex["m0"], convex["ds"],
                     TrainConfig(epochs=1, batch_size=FULL, learning_rate=0.1))
    with pytest.raises(I.StaleCache):
        I.psi_scores(convex["cache"], other, convex["ds"])


def test_psi_sign_and_rank_match_leave_one_out(convex):
    # removing a point changes the held-out criterion by ~psi/n, so psi
    # must rank the points like actual LOO retraining does, and the
    # flipped far point must come out most negative
    scores = {s.id: s.psi for s in
              I.psi_scores(convex["cache"], convex["model"], convex["ds"])}
    psi = np.array([scores[j] for j in range(FULL)])
    loo = np.array([convex["loo_crit"][j] * FULL for j in range(FULL)])
    assert spearmanr(psi, loo).statistic > 0.9
    out = convex["out_row"]
    assert scores[out] == psi.min()
    assert scores[out] < 0
    assert convex["loo_crit"][out] < 0  # its removal genuinely helps


# ---------------------------------------------------------------------------
# phi projection


def test_phi_zero_sum(convex):
    out = I.phi_projection(convex["model"], convex["ds"],
                           ParamVector.zeros(convex["model"].params.layout),
                           I.LissaConfig(seed=2))
    assert np.all(out.values == 0.0)


def test_phi_single_point_equals_inverse_hvp(convex):
    ds, m = convex["ds"], convex["model"]
    g = per_sample_grad(m, ds.features[3], ds.labels[3])
    cfg = I.LissaConfig(60, 0.05, 5.0, repeats=1, batch_size=16, seed=13)
    a = I.phi_projection(m, ds, g, cfg).values
    b = I.inverse_hvp(m, ds, g, cfg).values
    assert np.array_equal(a, b)


def test_phi_linear_under_common_seed(convex):
    ds, m = convex["ds"], convex["model"]
    rng = np.random.Generator(np.random.Philox(14))
    v1 = ParamVector(rng.normal(size=4), m.params.layout)
    v2 = ParamVector(rng.normal(size=4), m.params.layout)
    cfg = I.LissaConfig(50, 0.05, 5.0, repeats=2, batch_size=16, seed=31)
    combo = I.phi_projection(m, ds, 1.3 * v1 + (-0.4) * v2, cfg).values
    split = (1.3 * I.phi_projection(m, ds, v1, cfg).values
             - 0.4 * I.phi_projection(m, ds, v2, cfg).values)
    assert np.linalg.norm(combo - split) / np.linalg.norm(split) < 5e-2


# ---------------------------------------------------------------------------
# pairwise influence


def test_pairwise_zero_gradient_train_point(convex):
    spec = MlpSpec((1, 2))
    pv = ParamVector(np.array([1000.0, -1000.0, 0.0, 0.0]), layout_for(spec))
    m = MlpModel(spec, pv)
    # huge margin: the wrong-class probability underflows to exactly 0
    out = I.pairwise_influence(m, convex["ds"], (np.array([1.0]), 0),
                               convex["test_pt"], I.LissaConfig(seed=1))
    assert out == 0.0


def test_pairwise_rank_matches_loo_loss_drop(convex):
    ds, m = convex["ds"], convex["model"]
    by_margin = sorted(range(FULL), key=lambda j: abs(ds.features[j, 0]))
    sub = sorted(set(by_margin[::3][:12] + [convex["out_row"]]))
    cfg = I.LissaConfig(800, 0.01, 5.0, repeats=1, batch_size=FULL, seed=2)
    pw = [I.pairwise_influence(m, ds, (ds.features[j], int(ds.labels[j])),
                               convex["test_pt"], cfg) for j in sub]
    drops = [convex["loo_drop"][j] for j in sub]
    assert spearmanr(pw, drops).statistic > 0.9


def test_pairwise_mirror_symmetry():
    # dataset and parameters both symmetric under (x -> -x, class swap);
    # full-batch estimation keeps the symmetry exact up to rounding
    X = np.array([[-1.6], [-0.9], [-0.3], [0.3], [0.9], [1.6]])
    y = np.array([0, 0, 0, 1, 1, 1])
    ds = data.Dataset(X, y, np.arange(6, dtype=np.uint64), "mirror", num_classes=2)
    spec = MlpSpec((1, 2))
    m = MlpModel(spec, ParamVector(np.array([-0.8, 0.8, 0.0, 0.0]),
                                   layout_for(spec)))
    cfg = I.LissaConfig(400, 0.05, 5.0, repeats=1, batch_size=6, seed=4)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # hand-set params are not stationary
        a = I.pairwise_influence(m, ds, (np.array([0.9]), 1), (np.array([0.3]), 1), cfg)
        b = I.pairwise_influence(m, ds, (np.array([-0.9]), 0), (np.array([-0.3]), 0), cfg)
    assert a == pytest.approx(b, abs=1e-6)


# ---------------------------------------------------------------------------
# gradient-only scores


def test_ntk_equals_psi_when_cache_is_raw_criterion_grad(convex):
    gC = I.criterion_grad(convex["model"], convex["criterion"])
    cache = I.IhvpCache(
        vector=gC, criterion_loss="cross_entropy", eval_name="e", eval_hash="h",
        config_fingerprint="c",
        model_fingerprint=convex["model"].params.fingerprint(),
    )
    a = [s.psi for s in I.psi_scores(cache, convex["model"], convex["ds"])]
    b = [s.psi for s in I.ntk_scores(convex["model"], gC, convex["ds"])]
    assert np.abs(np.array(a) - np.array(b)).max() < 1e-8


def test_ntk_zero_criterion_grad(convex):
    zero = ParamVector.zeros(convex["model"].params.layout)
    assert all(s.psi == 0.0
               for s in I.ntk_scores(convex["model"], zero, convex["ds"]))


def test_ntk_flipped_outlier_most_negative(convex):
    gC = I.criterion_grad(convex["model"], convex["criterion"])
    scores = {s.id: s.psi for s in
              I.ntk_scores(convex["model"], gC, convex["ds"])}
    arr = np.array([scores[j] for j in range(FULL)])
    assert scores[convex["out_row"]] == arr.min()


# ---------------------------------------------------------------------------
# cache persistence


def test_cache_save_load_round_trip(convex, tmp_path):
    path = tmp_path / "cache.json"
    I.save_cache(convex["cache"], path)
    back = I.load_cache(path, convex["model"])
    assert np.array_equal(back.vector.values, convex["cache"].vector.values)
    assert back.eval_hash == convex["cache"].eval_hash
    assert back.config_fingerprint == convex["cache"].config_fingerprint


def test_cache_load_refuses_wrong_model(convex, tmp_path):
    path = tmp_path / "cache.json"
    I.save_cache(convex["cache"], path)
    with pytest.raises(I.StaleCache):
        I.load_cache(path, convex["m0"])


def test_cache_load_refuses_unknown_format(convex, tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"format": "other/1"}')
    with pytest.raises(ValueError):
        I.load_cache(path, convex["model"])
