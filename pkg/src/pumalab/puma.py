"""Influence-guided removal patching and the mislabel/calibration debuggers.

Removal never retrains. It raises the loss of the marked points by
stepping along the inverse-curvature direction of their summed gradient,
and cancels the criterion-level side effect of that step with a
reweighted pool of kept points, solved as a small elastic-net problem.
The same scores double as a debugging signal: points whose upweighting
would hurt the criterion are mislabel suspects, split by model
confidence into over-confident / over-uncertain / other noise.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import influence as infl
from .model import LossKind, MlpModel, ParamVector, forward, per_sample_grad

SOLVER_TOL = 1e-10
SOLVER_MAX_ITERS = 10_000
ETA_CAP = 0.5
CALIBRATION_ETA_CAP = 1e-3


@dataclass(frozen=True)
class RemovalConfig:
    eta: float = 0.05
    l1: float = 0.0
    l2: float = 1e-4
    pool_size: int = 512
    lambda_box: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.eta < 0:
            raise ValueError("eta must be nonnegative")
        if self.eta > ETA_CAP:
            raise ValueError(f"eta {self.eta} exceeds the hard cap {ETA_CAP}")
        if self.l1 < 0 or self.l2 < 0:
            raise ValueError("l1 and l2 must be nonnegative")
        if self.pool_size < 1:
            raise ValueError("pool_size must be positive")
        if self.lambda_box <= 0:
            raise ValueError("lambda_box must be positive")


@dataclass(frozen=True)
class LambdaSolution:
    ids: tuple
    lambdas: np.ndarray
    objective_value: float
    nnz: int
    iterations: int
    attainable: bool
    objective_trace: tuple

    def __post_init__(self):
        arr = np.asarray(self.lambdas, dtype=np.float64)
        arr.setflags(write=False)
        object.__setattr__(self, "lambdas", arr)


@dataclass(frozen=True)
class RemovalDiagnostics:
    marked_ids: tuple
    pool_ids: tuple
    lambdas: np.ndarray
    eta: float
    objective_value: float
    phi_mk: ParamVector
    phi_up: ParamVector
    accuracy_before: float
    accuracy_after: float

    def to_json(self):
        return {
            "marked_ids": [int(i) for i in self.marked_ids],
            "pool_ids": [int(i) for i in self.pool_ids],
            "lambdas": [float(x) for x in self.lambdas],
            "eta": float(self.eta),
            "objective_value": float(self.objective_value),
            "phi_mk_norm": self.phi_mk.norm(),
            "phi_up_norm": self.phi_up.norm(),
            "accuracy_before": float(self.accuracy_before),
            "accuracy_after": float(self.accuracy_after),
        }


@dataclass(frozen=True)
class DebugReport:
    suspects: tuple
    categories: dict
    influence: dict
    confidence: dict


def _rng(*entropy):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def _argmax_accuracy(model, dataset):
    probs = forward(model, dataset.features)
    return float((probs.argmax(axis=1) == dataset.labels).mean())


# ---------------------------------------------------------------------------
# lambda solver


def solve_lambda(psi_pool, psi_marked_sum, cfg):
    """Minimize (sum_j lambda_j psi_j - target)^2 + l1|lambda|_1
    + l2|lambda|_2^2 subject to |lambda_j| <= lambda_box.

    Proximal gradient with the exact Lipschitz step 1/(2(|psi|^2 + l2)):
    gradient step on the smooth part, soft-threshold by step*l1, clip to
    the box. Starts at zero, so the solution never scores worse than
    doing nothing.
    """
    if len(psi_pool) == 0:
        raise ValueError("upweight pool is empty")
    ids = tuple(int(s.id) for s in psi_pool)
    psi = np.array([s.psi for s in psi_pool], dtype=np.float64)
    target = float(psi_marked_sum)
    box = float(cfg.lambda_box)

    def objective(lam):
        r = float(lam @ psi) - target
        return r * r + cfg.l1 * float(np.abs(lam).sum()) + cfg.l2 * float(lam @ lam)

    lam = np.zeros_like(psi)
    trace = [objective(lam)]
    lipschitz = 2.0 * (float(psi @ psi) + cfg.l2)
    if lipschitz == 0.0:
        # flat smooth part: zero is optimal for any penalty
        return LambdaSolution(ids, lam, trace[0], 0, 0,
                              attainable=(target == 0.0), objective_trace=tuple(trace))
    step = 1.0 / lipschitz
    iters = 0
    for iters in range(1, SOLVER_MAX_ITERS + 1):
        r = float(lam @ psi) - target
        grad = 2.0 * r * psi + 2.0 * cfg.l2 * lam
        z = lam - step * grad
        z = np.sign(z) * np.maximum(np.abs(z) - step * cfg.l1, 0.0)
        z = np.clip(z, -box, box)
        delta = np.abs(z - lam).max()
        lam = z
        trace.append(objective(lam))
        if delta < SOLVER_TOL:
            break
    attainable = not (float(np.abs(psi).max()) == 0.0 and target != 0.0)
    return LambdaSolution(ids, lam, trace[-1], int(np.count_nonzero(lam)),
                          iters, attainable, tuple(trace))


def _empty_solution(target):
    return LambdaSolution((), np.zeros(0), float(target) * float(target), 0, 0,
                          attainable=(float(target) == 0.0), objective_trace=())


# ---------------------------------------------------------------------------
# removal


def _summed_grad(model, dataset, rows, weights=None):
    total = np.zeros(len(model.params))
    for pos, r in enumerate(rows):
        w = 1.0 if weights is None else float(weights[pos])
        if w == 0.0:
            continue
        g = per_sample_grad(model, dataset.features[r], dataset.labels[r])
        total += w * g.values
    return ParamVector(total, model.params.layout)


def remove(model, train_set, marked_ids, criterion, cfg, lissa_cfg,
           allow_empty=False, pool_ids=None):
    """Patch the model so the marked points' information is removed.

    Five stages: cache the inverse-HVP of the criterion gradient; pick an
    upweight pool from the unmarked ids (or use ``pool_ids``); score both
    sets; solve for the pool reweighting that cancels the marked
    contribution; then patch
        theta_mod = theta_org + eta * (phi_marked - phi_pool)
    where each phi is the inverse-HVP of a summed gradient. Returns the
    patched model, the reweighting solution, and diagnostics carrying the
    full phi vectors so the patch identity can be audited.
    """
    marked = frozenset(int(i) for i in marked_ids)
    all_ids = set(int(i) for i in train_set.ids)
    if not marked:
        if not allow_empty:
            raise ValueError("marked set is empty")
    missing = marked - all_ids
    if missing:
        raise ValueError(f"marked ids not in training set: {sorted(missing)[:5]}")

    if pool_ids is not None:
        pool = [int(i) for i in pool_ids]
        if set(pool) & marked:
            raise ValueError("marked set and upweight pool overlap")
        bad = set(pool) - all_ids
        if bad:
            raise ValueError(f"pool ids not in training set: {sorted(bad)[:5]}")
    else:
        remaining = np.array(sorted(all_ids - marked), dtype=np.int64)
        take = min(cfg.pool_size, remaining.size)
        if take:
            pick = _rng(cfg.seed, 0x504F).choice(remaining.size, size=take,
                                                 replace=False)
            pool = [int(remaining[p]) for p in np.sort(pick)]
        else:
            pool = []

    cache = infl.build_cache(model, train_set, criterion, lissa_cfg)

    marked_rows = train_set.rows_of(marked) if marked else np.zeros(0, dtype=np.intp)
    pool_rows = train_set.rows_of(pool) if pool else np.zeros(0, dtype=np.intp)
    marked_view = train_set.take(marked) if marked else None
    psi_marked_sum = 0.0
    if marked:
        psi_marked_sum = float(sum(s.psi for s in
                                   infl.psi_scores(cache, model, marked_view)))
    if pool:
        pool_scores = infl.psi_scores(cache, model, train_set.take(pool))
        by_id = {s.id: s for s in pool_scores}
        pool_scores = [by_id[i] for i in pool]
        solution = solve_lambda(pool_scores, psi_marked_sum, cfg)
    else:
        solution = _empty_solution(psi_marked_sum)

    if marked:
        v_mk = _summed_grad(model, train_set, marked_rows)
        phi_mk = infl.phi_projection(model, train_set, v_mk, lissa_cfg)
    else:
        phi_mk = ParamVector.zeros(model.params.layout)
    if pool and solution.nnz:
        v_up = _summed_grad(model, train_set, pool_rows, solution.lambdas)
        phi_up = infl.phi_projection(model, train_set, v_up, lissa_cfg)
    else:
        phi_up = ParamVector.zeros(model.params.layout)

    if cfg.eta == 0.0 or (not marked and solution.nnz == 0):
        patched_values = model.params.values.copy()
    else:
        patched_values = model.params.values + cfg.eta * (phi_mk.values - phi_up.values)
    patched = MlpModel(model.spec, ParamVector(patched_values, model.params.layout))

    diag = RemovalDiagnostics(
        marked_ids=tuple(sorted(marked)),
        pool_ids=tuple(pool),
        lambdas=solution.lambdas,
        eta=cfg.eta,
        objective_value=solution.objective_value,
        phi_mk=phi_mk,
        phi_up=phi_up,
        accuracy_before=_argmax_accuracy(model, train_set),
        accuracy_after=_argmax_accuracy(patched, train_set),
    )
    return patched, solution, diag


# ---------------------------------------------------------------------------
# debugging


def _top_k(pairs, k):
    """First k ids of (key, id) pairs sorted ascending; ties by id."""
    return frozenset(i for _, i in sorted(pairs)[:k])


def debug_mislabels(model, train_set, criterion, k, lissa_cfg):
    """Rank training points as mislabel suspects.

    A point is suspicious when upweighting it would raise the criterion
    loss (negative score) and its confidence is neither so low that it is
    an obvious hard case nor so high that it is an obvious easy one. The
    surviving set is dropped entirely if it looks no worse on average
    than the low-confidence group, which catches clean datasets.
    """
    if not (0 < k <= train_set.n):
        raise ValueError(f"k must be in (0, {train_set.n}]")
    cache = infl.build_cache(model, train_set, criterion, lissa_cfg)
    scores = infl.psi_scores(cache, model, train_set)
    psi = {s.id: s.psi for s in scores}
    probs = forward(model, train_set.features)
    conf = {int(train_set.ids[i]): float(probs[i, train_set.labels[i]])
            for i in range(train_set.n)}

    l_if = _top_k([(psi[i], i) for i in psi], k)
    l_cf = _top_k([(conf[i], i) for i in conf], k)
    h_cf = _top_k([(-conf[i], i) for i in conf], k)

    suspects = l_if - (l_cf | h_cf)
    core = l_if & l_cf
    if suspects and core:
        if np.mean([psi[i] for i in suspects]) > np.mean([psi[i] for i in core]):
            suspects = frozenset()
    ranked = tuple(sorted(suspects, key=lambda i: (psi[i], i)))
    return DebugReport(suspects=ranked, categories={}, influence=psi, confidence=conf)


def debug_categories(model, train_set, criterion, k, lissa_cfg):
    """Split the most-harmful points into over-confident (memorized),
    over-uncertain (hard), and other noise. With large k a point can fall
    in both confidence extremes; over-uncertain wins so the categories
    stay disjoint."""
    if not (0 < k <= train_set.n):
        raise ValueError(f"k must be in (0, {train_set.n}]")
    cache = infl.build_cache(model, train_set, criterion, lissa_cfg)
    scores = infl.psi_scores(cache, model, train_set)
    psi = {s.id: s.psi for s in scores}
    probs = forward(model, train_set.features)
    conf = {int(train_set.ids[i]): float(probs[i, train_set.labels[i]])
            for i in range(train_set.n)}

    l_if = _top_k([(psi[i], i) for i in psi], k)
    l_cf = _top_k([(conf[i], i) for i in conf], k)
    h_cf = _top_k([(-conf[i], i) for i in conf], k)

    s2 = l_if & l_cf
    s1 = (l_if & h_cf) - s2
    s3 = l_if - (l_cf | h_cf)
    ranked = tuple(sorted(l_if, key=lambda i: (psi[i], i)))
    return DebugReport(
        suspects=ranked,
        categories={"over_confident": s1, "over_uncertain": s2, "other_noise": s3},
        influence=psi,
        confidence=conf,
    )


def calibration_patch(model, train_set, lissa_cfg, eta, k=None, removal_cfg=None):
    """Patch the model toward better calibration: treat the memorized and
    unexplained harmful points as the removal set and the genuinely hard
    ones as the upweight pool, with a much smaller step than removal."""
    if eta < 0 or eta > CALIBRATION_ETA_CAP:
        raise ValueError(f"eta must be in [0, {CALIBRATION_ETA_CAP}] for calibration")
    if k is None:
        k = max(1, train_set.n // 10)
    criterion = infl.CriterionSpec(LossKind.calibration_surrogate, train_set)
    report = debug_categories(model, train_set, criterion, k, lissa_cfg)
    d_mk = report.categories["over_confident"] | report.categories["other_noise"]
    d_up = report.categories["over_uncertain"]
    if not d_mk:
        warnings.warn("no over-confident or other-noise points found; "
                      "calibration patch is a no-op", stacklevel=2)
        return model
    cfg = removal_cfg or RemovalConfig(eta=min(eta, ETA_CAP))
    if cfg.eta != eta:
        cfg = RemovalConfig(eta=eta, l1=cfg.l1, l2=cfg.l2, pool_size=cfg.pool_size,
                            lambda_box=cfg.lambda_box, seed=cfg.seed)
    patched, _, _ = remove(model, train_set, d_mk, criterion, cfg, lissa_cfg,
                           pool_ids=sorted(d_up))
    return patched
