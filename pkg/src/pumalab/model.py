"""Small dense softmax classifiers with exact derivatives.

The networks are deliberately tiny and everything runs in float64: the
downstream influence arithmetic subtracts nearly-equal Hessian-vector
products, and the ledger/removal identities in this package are *bitwise*
contracts, so training is plain SGD with counter-based seeding and no
hidden nondeterminism anywhere.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import autodiff as ad

CHECKPOINT_FORMAT = "pumalab-mlp/1"


class LossKind(Enum):
    """Training loss (cross_entropy) and the smooth calibration proxy.

    calibration_surrogate is the mean of (p(true label) - correct)^2 with
    correct the frozen 0/1 argmax-correctness indicator; it is smooth in
    the parameters wherever evaluated, unlike binned calibration error.
    """

    cross_entropy = "cross_entropy"
    calibration_surrogate = "calibration_surrogate"


@dataclass(frozen=True)
class MlpSpec:
    layer_dims: tuple
    activation: str = "relu"
    seed: int = 0

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        if len(dims) < 2:
            raise ValueError("need at least input and output dims")
        if any(d <= 0 for d in dims):
            raise ValueError("layer dims must be positive")
        if dims[-1] < 2:
            raise ValueError("output dim (number of classes) must be >= 2")
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def num_classes(self):
        return self.layer_dims[-1]


def layout_for(spec):
    out = []
    for l in range(len(spec.layer_dims) - 1):
        fan_in, fan_out = spec.layer_dims[l], spec.layer_dims[l + 1]
        out.append((f"W{l}", (fan_in, fan_out)))
        out.append((f"b{l}", (fan_out,)))
    return tuple(out)


def param_count(spec):
    return sum(int(np.prod(s)) for _, s in layout_for(spec))


class ParamVector:
    """Flat float64 vector over all trainable parameters, plus layout.

    Supports the little vector algebra influence math needs (+, -, scalar
    *, dot, norm). The layout is shared, never copied per instance.
    """

    __slots__ = ("values", "layout")

    def __init__(self, values, layout):
        v = np.asarray(values, dtype=np.float64)
        if v.ndim != 1:
            raise ValueError("values must be a flat vector")
        expect = sum(int(np.prod(s)) for _, s in layout)
        if v.shape[0] != expect:
            raise ValueError(f"length {v.shape[0]} does not match layout total {expect}")
        self.values = v
        self.layout = tuple(layout)

    @classmethod
    def zeros(cls, layout):
        total = sum(int(np.prod(s)) for _, s in layout)
        return cls(np.zeros(total), layout)

    def copy(self):
        return ParamVector(self.values.copy(), self.layout)

    def unflatten(self):
        """Per-layer views in layout order (read-only use)."""
        arrays = []
        off = 0
        for _, shape in self.layout:
            size = int(np.prod(shape))
            arrays.append(self.values[off:off + size].reshape(shape))
            off += size
        return arrays

    @classmethod
    def from_arrays(cls, arrays, layout):
        flat = np.concatenate([np.asarray(a, dtype=np.float64).ravel() for a in arrays])
        return cls(flat, layout)

    def _check(self, other):
        if self.layout != other.layout:
            raise ValueError("parameter layouts differ")

    def __add__(self, other):
        self._check(other)
        return ParamVector(self.values + other.values, self.layout)

    def __sub__(self, other):
        self._check(other)
        return ParamVector(self.values - other.values, self.layout)

    def __mul__(self, scalar):
        return ParamVector(self.values * float(scalar), self.layout)

    __rmul__ = __mul__

    def dot(self, other):
        self._check(other)
        return float(self.values @ other.values)

    def norm(self):
        return float(np.linalg.norm(self.values))

    def allfinite(self):
        return bool(np.all(np.isfinite(self.values)))

    def fingerprint(self):
        h = hashlib.sha256(self.values.tobytes())
        h.update(repr(self.layout).encode())
        return h.hexdigest()

    def __eq__(self, other):
        return (isinstance(other, ParamVector) and self.layout == other.layout
                and np.array_equal(self.values, other.values))

    def __len__(self):
        return self.values.shape[0]


@dataclass(frozen=True)
class MlpModel:
    spec: MlpSpec
    params: ParamVector

    def __post_init__(self):
        if self.params.layout != layout_for(self.spec):
            raise ValueError("params layout does not match spec")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int
    learning_rate: float
    optimizer: str = "sgd"
    shuffle_seed: int = 0
    record_ledger: bool = False

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0 or self.learning_rate <= 0:
            raise ValueError("epochs, batch_size, learning_rate must be positive")
        if self.optimizer != "sgd":
            raise ValueError("only plain sgd is supported")


@dataclass(frozen=True)
class LedgerEntry:
    epoch: int
    batch_index: int
    member_ids: tuple
    delta: ParamVector


@dataclass
class BatchLedger:
    entries: list = field(default_factory=list)


@dataclass
class AmnesiacLedger(BatchLedger):
    """BatchLedger plus the initial snapshot and final fingerprint needed
    for exact replay-based subtraction."""

    initial_params: ParamVector = None
    final_fingerprint: str = ""

    def replay(self, skip_ids=frozenset()):
        """Re-accumulate deltas from the initial snapshot, skipping every
        batch that intersects ``skip_ids``. Addition happens in original
        order, so skip_ids=∅ reproduces the final parameters bitwise and
        skipping everything returns the initial snapshot bitwise."""
        skip = set(int(i) for i in skip_ids)
        acc = self.initial_params.values.copy()
        for e in self.entries:
            if skip and any(int(i) in skip for i in e.member_ids):
                continue
            acc += e.delta.values
        return ParamVector(acc, self.initial_params.layout)


class TrainingDivergence(RuntimeError):
    pass


def _rng(*entropy):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def init_mlp(spec):
    """Uniform init in ±sqrt(6/(fan_in+fan_out)) from a counter-based
    generator; bit-identical for identical specs."""
    rng = _rng(spec.seed, 0x1417)
    arrays = []
    for l in range(len(spec.layer_dims) - 1):
        fan_in, fan_out = spec.layer_dims[l], spec.layer_dims[l + 1]
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        arrays.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        arrays.append(rng.uniform(-bound, bound, size=(fan_out,)))
    return MlpModel(spec, ParamVector.from_arrays(arrays, layout_for(spec)))


# ---------------------------------------------------------------------------
# forward passes


def _forward_raw(spec, arrays, X):
    """Plain numpy logits; X is (n, d)."""
    act = np.maximum if spec.activation == "relu" else None
    h = X
    n_layers = len(spec.layer_dims) - 1
    for l in range(n_layers):
        W, b = arrays[2 * l], arrays[2 * l + 1]
        h = h @ W + b
        if l < n_layers - 1:
            h = np.maximum(h, 0.0) if spec.activation == "relu" else np.tanh(h)
    return h


def forward(model, x):
    """Softmax class probabilities for one sample (1-D) or a batch (2-D)."""
    X = np.asarray(x, dtype=np.float64)
    single = X.ndim == 1
    if single:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != model.spec.layer_dims[0]:
        raise ValueError(
            f"input dim {X.shape[-1] if X.ndim else '?'} does not match "
            f"model input {model.spec.layer_dims[0]}"
        )
    z = _forward_raw(model.spec, model.params.unflatten(), X)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    return p[0] if single else p


def _forward_graph(spec, param_tensors, X):
    Xc = ad.const(X)
    h = Xc
    n_layers = len(spec.layer_dims) - 1
    for l in range(n_layers):
        W, b = param_tensors[2 * l], param_tensors[2 * l + 1]
        h = ad.add(ad.matmul(h, W), b)
        if l < n_layers - 1:
            h = ad.relu(h) if spec.activation == "relu" else ad.tanh(h)
    return h


def _loss_graph(spec, param_tensors, X, y, loss_kind):
    """Mean loss over the rows of X as a graph tensor."""
    z = _forward_graph(spec, param_tensors, X)
    y = np.asarray(y, dtype=np.intp)
    if loss_kind is LossKind.cross_entropy:
        lse = ad.logsumexp_rows(z)
        picked = ad.gather_rows(z, y)
        return ad.tmean(ad.sub(lse, picked))
    # calibration surrogate: (p_true - correct)^2, correctness frozen
    lse = ad.logsumexp_rows(z)
    p_true = ad.exp(ad.sub(ad.gather_rows(z, y), lse))
    correct = (z.data.argmax(axis=1) == y).astype(np.float64)
    diff = ad.sub(p_true, correct)
    return ad.tmean(ad.mul(diff, diff))


def _param_tensors(model):
    return [ad.leaf(a.copy()) for a in model.params.unflatten()]


def _tensors_to_pv(tensors, layout):
    return ParamVector.from_arrays([t.data for t in tensors], layout)


def per_sample_grad(model, x, y, loss=LossKind.cross_entropy):
    """Exact reverse-mode gradient of the single-sample loss."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != model.spec.layer_dims[0]:
        raise ValueError("x must be a single sample of the model's input dim")
    y = int(y)
    if not (0 <= y < model.spec.num_classes):
        raise ValueError(f"label {y} outside [0, {model.spec.num_classes})")
    ts = _param_tensors(model)
    loss_t = _loss_graph(model.spec, ts, x[None, :], [y], loss)
    gs = ad.grad(loss_t, ts)
    return _tensors_to_pv(gs, model.params.layout)


def mean_grad(model, dataset, loss=LossKind.cross_entropy):
    """Gradient of the mean loss over the whole dataset."""
    if dataset.n == 0:
        raise ValueError("dataset is empty")
    ts = _param_tensors(model)
    loss_t = _loss_graph(model.spec, ts, dataset.features, dataset.labels, loss)
    gs = ad.grad(loss_t, ts)
    return _tensors_to_pv(gs, model.params.layout)


def hvp(model, dataset, v, loss=LossKind.cross_entropy):
    """Exact Hessian-vector product of the mean loss, computed as the
    gradient of <mean_grad, v> (double reverse-mode)."""
    if dataset.n == 0:
        raise ValueError("dataset is empty")
    if v.layout != model.params.layout:
        raise ValueError("direction vector layout does not match model")
    ts = _param_tensors(model)
    loss_t = _loss_graph(model.spec, ts, dataset.features, dataset.labels, loss)
    gs = ad.grad(loss_t, ts, create_graph=True)
    v_arrays = v.unflatten()
    s = None
    for g, va in zip(gs, v_arrays):
        term = ad.dot(g, ad.const(va))
        s = term if s is None else ad.add(s, term)
    hs = ad.grad(s, ts)
    return _tensors_to_pv(hs, model.params.layout)


def hvp_batch(model, X, y, v):
    """hvp of the mean cross-entropy over an explicit (X, y) minibatch;
    the LiSSA inner loop calls this with fresh random batches."""
    ts = _param_tensors(model)
    loss_t = _loss_graph(model.spec, ts, X, y, LossKind.cross_entropy)
    gs = ad.grad(loss_t, ts, create_graph=True)
    s = None
    for g, va in zip(gs, v.unflatten()):
        term = ad.dot(g, ad.const(va))
        s = term if s is None else ad.add(s, term)
    hs = ad.grad(s, ts)
    return _tensors_to_pv(hs, model.params.layout)


# ---------------------------------------------------------------------------
# training


def _epoch_batches(rng, dataset, batch_size, group_rows):
    """Row-index batches for one epoch. With group_rows, those rows are
    packed into the fewest possible contiguous batches placed first."""
    if group_rows is None:
        perm = rng.permutation(dataset.n)
        return [perm[i:i + batch_size] for i in range(0, dataset.n, batch_size)]
    grp = group_rows[rng.permutation(group_rows.size)]
    rest = np.setdiff1d(np.arange(dataset.n), group_rows, assume_unique=False)
    rest = rest[rng.permutation(rest.size)]
    batches = [grp[i:i + batch_size] for i in range(0, grp.size, batch_size)]
    batches += [rest[i:i + batch_size] for i in range(0, rest.size, batch_size)]
    return batches


def train(model, dataset, config, group_ids=None):
    """Plain SGD on mean-batch cross-entropy.

    Returns (trained model, ledger or None). With record_ledger every
    applied per-batch delta is stored so initial + sum(deltas) replays to
    the final parameters exactly. ``group_ids`` packs those samples into
    the fewest possible batches (the ordered removal scenario).
    """
    if config.batch_size > dataset.n:
        raise ValueError("batch_size exceeds dataset size")
    if dataset.dim != model.spec.layer_dims[0]:
        raise ValueError("dataset dim does not match model input")
    if dataset.num_classes > model.spec.num_classes:
        raise ValueError("dataset has more classes than the model emits")
    spec = model.spec
    layout = model.params.layout
    current = [a.copy() for a in model.params.unflatten()]
    initial = ParamVector.from_arrays(current, layout)
    ledger = AmnesiacLedger(initial_params=initial) if config.record_ledger else None
    rng = _rng(config.shuffle_seed, 0x5491)
    group_rows = dataset.rows_of(group_ids) if group_ids else None
    lr = float(config.learning_rate)

    for epoch in range(config.epochs):
        for b_idx, rows in enumerate(_epoch_batches(rng, dataset, config.batch_size, group_rows)):
            ts = [ad.leaf(a) for a in current]
            loss_t = _loss_graph(spec, ts, dataset.features[rows], dataset.labels[rows],
                                 LossKind.cross_entropy)
            if not np.isfinite(loss_t.data):
                raise TrainingDivergence(f"non-finite loss at epoch {epoch}")
            gs = ad.grad(loss_t, ts)
            deltas = [(-lr) * g.data for g in gs]
            for a, d in zip(current, deltas):
                a += d
            if ledger is not None:
                ledger.entries.append(LedgerEntry(
                    epoch, b_idx,
                    tuple(int(dataset.ids[r]) for r in rows),
                    ParamVector.from_arrays(deltas, layout),
                ))
    final = ParamVector.from_arrays(current, layout)
    if ledger is not None:
        ledger.final_fingerprint = final.fingerprint()
    return MlpModel(spec, final), ledger


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model, path, extra=None):
    payload = {
        "format": CHECKPOINT_FORMAT,
        "layer_dims": list(model.spec.layer_dims),
        "activation": model.spec.activation,
        "seed": int(model.spec.seed),
        "params": [float(v) for v in model.params.values],
    }
    if extra:
        payload["extra"] = extra
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)
    return path


def load_checkpoint(path):
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unrecognized checkpoint format {payload.get('format')!r}")
    spec = MlpSpec(tuple(payload["layer_dims"]), payload["activation"], payload["seed"])
    pv = ParamVector(np.asarray(payload["params"], dtype=np.float64), layout_for(spec))
    return MlpModel(spec, pv)
