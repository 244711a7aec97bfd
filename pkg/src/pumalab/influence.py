"""Contribution scores from inverse-Hessian-vector products.

The expensive object is u = (H + damping·I)^-1 g, estimated by the
stochastic truncated-Neumann recursion (minibatch Hessian samples,
averaged repeats). Everything downstream is inner products against that
one cached vector: per-sample contribution scores, projections of summed
gradients, and train/test cross-influence. A gradient-only variant
(no inverse Hessian) is kept as the cheap comparison scorer.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass

import numpy as np

from .model import (
    LossKind,
    ParamVector,
    hvp,
    hvp_batch,
    mean_grad,
    per_sample_grad,
)

CACHE_FORMAT = "pumalab-ihvp/1"

STATIONARITY_WARN_NORM = 1e-2
DIVERGENCE_FACTOR = 1e6


class LissaDivergence(RuntimeError):
    pass


class StaleCache(RuntimeError):
    pass


@dataclass(frozen=True)
class CriterionSpec:
    """What 'performance' means: a loss kind and the set it is averaged over."""

    loss: LossKind
    eval_set: object

    def descriptor(self):
        return {
            "loss": self.loss.value,
            "eval_name": self.eval_set.name,
            "eval_hash": self.eval_set.content_hash(),
        }


@dataclass(frozen=True)
class LissaConfig:
    recursion_depth: int = 1000
    damping: float = 0.01
    scale: float = 10.0
    repeats: int = 4
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.recursion_depth < 1 or self.repeats < 1 or self.batch_size < 1:
            raise ValueError("recursion_depth, repeats, batch_size must be positive")
        if self.damping < 0:
            raise ValueError("damping must be nonnegative")
        if self.scale <= 0:
            raise ValueError("scale must be positive")

    def fingerprint(self):
        key = (self.recursion_depth, self.damping, self.scale,
               self.repeats, self.batch_size, self.seed)
        return hashlib.sha256(repr(key).encode()).hexdigest()


@dataclass(frozen=True)
class IhvpCache:
    """One inverse-HVP result bound to the exact model it came from.

    ``vector`` is (H + damping)^-1 of the criterion gradient; scoring is
    refused if the model's parameter fingerprint no longer matches.
    """

    vector: ParamVector
    criterion_loss: str
    eval_name: str
    eval_hash: str
    config_fingerprint: str
    model_fingerprint: str


@dataclass(frozen=True)
class InfluenceScore:
    id: int
    psi: float


def _rng(*entropy):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def criterion_grad(model, criterion):
    """Mean gradient of the criterion loss over its eval set."""
    if criterion.eval_set.n == 0:
        raise ValueError("criterion eval set is empty")
    return mean_grad(model, criterion.eval_set, criterion.loss)


def inverse_hvp(model, train_set, v, cfg, check_stationarity=True):
    """Estimate (H + damping·I)^-1 v for H the training-loss Hessian.

    Runs cfg.repeats independent recursions
        r_t = v + r_{t-1} - (H_batch r_{t-1} + damping·r_{t-1}) / scale
    with a fresh random minibatch Hessian each step, averages them, and
    divides by scale. Deterministic given cfg.seed. Raises if an iterate
    grows past 1e6 times ||v||, which means scale or damping is too small
    for this model's curvature.
    """
    if v.layout != model.params.layout:
        raise ValueError("vector layout does not match model")
    vn = v.norm()
    if vn == 0.0:
        return ParamVector.zeros(v.layout)
    if check_stationarity:
        gn = mean_grad(model, train_set).norm()
        if gn > STATIONARITY_WARN_NORM:
            warnings.warn(
                f"training gradient norm {gn:.3e} exceeds {STATIONARITY_WARN_NORM}; "
                "the inverse-curvature estimate assumes a near-stationary model",
                stacklevel=2,
            )
    n = train_set.n
    bs = min(cfg.batch_size, n)
    limit = DIVERGENCE_FACTOR * vn
    acc = np.zeros_like(v.values)
    for rep in range(cfg.repeats):
        rng = _rng(cfg.seed, rep, 0x4C53)
        r = v.values.copy()
        for t in range(cfg.recursion_depth):
            rows = rng.choice(n, size=bs, replace=False) if bs < n else np.arange(n)
            hr = hvp_batch(model, train_set.features[rows], train_set.labels[rows],
                           ParamVector(r, v.layout))
            r = v.values + r - (hr.values + cfg.damping * r) / cfg.scale
            if not np.all(np.isfinite(r)) or np.linalg.norm(r) > limit:
                raise LissaDivergence(
                    f"inverse-HVP iterate diverged at step {t} (repeat {rep}); "
                    f"increase scale (now {cfg.scale}) or damping (now {cfg.damping})"
                )
        acc += r
    return ParamVector(acc / (cfg.repeats * cfg.scale), v.layout)


def spectral_check(model, train_set, cfg, iters=15):
    """Power-iteration estimate of the damped Hessian's largest eigenvalue
    magnitude; warns when it reaches cfg.scale (the recursion would not
    contract). Returns the estimate."""
    rng = _rng(cfg.seed, 0x5054)
    u = rng.normal(size=len(model.params))
    u /= np.linalg.norm(u)
    est = 0.0
    for _ in range(iters):
        hu = hvp(model, train_set, ParamVector(u, model.params.layout)).values
        hu = hu + cfg.damping * u
        est = float(np.linalg.norm(hu))
        if est == 0.0:
            return 0.0
        u = hu / est
    if est >= cfg.scale:
        warnings.warn(
            f"damped-curvature spectral estimate {est:.3e} >= scale {cfg.scale}; "
            "the recursion will not contract, increase scale",
            stacklevel=2,
        )
    return est


def build_cache(model, train_set, criterion, cfg):
    """Criterion gradient pushed through the inverse HVP, fingerprinted
    against the model so later scoring can detect staleness."""
    g = criterion_grad(model, criterion)
    vec = inverse_hvp(model, train_set, g, cfg)
    d = criterion.descriptor()
    return IhvpCache(
        vector=vec,
        criterion_loss=d["loss"],
        eval_name=d["eval_name"],
        eval_hash=d["eval_hash"],
        config_fingerprint=cfg.fingerprint(),
        model_fingerprint=model.params.fingerprint(),
    )


def psi_scores(cache, model, samples):
    """Contribution score of each sample: the inner product of its
    training-loss gradient with the cached inverse-HVP vector. Positive
    means upweighting the sample lowers the criterion loss; mislabeled or
    harmful samples come out negative."""
    if cache.model_fingerprint != model.params.fingerprint():
        raise StaleCache("cache was built for a different parameter vector")
    out = []
    for i in range(samples.n):
        g = per_sample_grad(model, samples.features[i], samples.labels[i])
        psi = cache.vector.dot(g)
        if not np.isfinite(psi):
            raise ValueError(f"non-finite score for sample {int(samples.ids[i])}")
        out.append(InfluenceScore(int(samples.ids[i]), psi))
    return out


def phi_projection(model, train_set, weighted_grad_sum, cfg):
    """Inverse HVP of an (optionally weighted) gradient sum. Same
    machinery as inverse_hvp; kept separate because the removal patch
    applies it to summed, not per-sample, gradients."""
    return inverse_hvp(model, train_set, weighted_grad_sum, cfg)


def pairwise_influence(model, train_set, train_pt, test_pt, cfg):
    """Influence of one training point on one test point's loss:
    -<grad L(test), (H+damping)^-1 grad L(train)>. Positive means
    removing the training point would raise the test point's loss."""
    xt, yt = train_pt
    xs, ys = test_pt
    g_train = per_sample_grad(model, np.asarray(xt, dtype=np.float64), int(yt))
    if g_train.norm() == 0.0:
        return 0.0
    u = inverse_hvp(model, train_set, g_train, cfg)
    g_test = per_sample_grad(model, np.asarray(xs, dtype=np.float64), int(ys))
    return -g_test.dot(u)


def ntk_scores(model, criterion_gradient, samples):
    """Gradient-only variant of psi_scores: plain inner products with the
    criterion gradient, no inverse Hessian. Cheap, less faithful."""
    out = []
    for i in range(samples.n):
        g = per_sample_grad(model, samples.features[i], samples.labels[i])
        out.append(InfluenceScore(int(samples.ids[i]), criterion_gradient.dot(g)))
    return out


# ---------------------------------------------------------------------------
# cache persistence


def save_cache(cache, path):
    payload = {
        "format": CACHE_FORMAT,
        "vector": [float(x) for x in cache.vector.values],
        "layout": [[name, list(shape)] for name, shape in cache.vector.layout],
        "criterion_loss": cache.criterion_loss,
        "eval_name": cache.eval_name,
        "eval_hash": cache.eval_hash,
        "config_fingerprint": cache.config_fingerprint,
        "model_fingerprint": cache.model_fingerprint,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)
    return path


def load_cache(path, model):
    """Reload a saved inverse-HVP vector; refuses if the model on hand is
    not the one the cache was computed against."""
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != CACHE_FORMAT:
        raise ValueError(f"unrecognized cache format {payload.get('format')!r}")
    if payload["model_fingerprint"] != model.params.fingerprint():
        raise StaleCache("cache file was computed for different model parameters")
    layout = tuple((name, tuple(shape)) for name, shape in payload["layout"])
    vec = ParamVector(np.asarray(payload["vector"], dtype=np.float64), layout)
    return IhvpCache(
        vector=vec,
        criterion_loss=payload["criterion_loss"],
        eval_name=payload["eval_name"],
        eval_hash=payload["eval_hash"],
        config_fingerprint=payload["config_fingerprint"],
        model_fingerprint=payload["model_fingerprint"],
    )
