"""Experiment configuration: a strict INI reader.

Every section and key is enumerated here; unknown ones are errors, and
nothing is read from the environment. The training entry is a schedule:
one or more epochs:batch:learning-rate phases sharing a base shuffle
seed (phase i uses base + i), which is how the partially-converged
debugging fixtures are expressed.
"""

import configparser
from dataclasses import dataclass, field

from .influence import LissaConfig
from .model import TrainConfig
from .puma import CALIBRATION_ETA_CAP, RemovalConfig

GENERATORS = ("two_moons", "radial", "rectangular", "spiral")
METHODS = ("puma", "retrain", "sisa", "amnesiac")


class ConfigError(ValueError):
    """Bad configuration file or values; maps to CLI exit code 1."""


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "two_moons"
    n: int = 600
    noise: float = 0.2
    seed: int = 0
    eval_n: int = 0  # 0: same as n
    path: str = ""
    label_column: str = "label"
    flip_fraction: float = 0.0

    def __post_init__(self):
        if self.kind not in GENERATORS + ("csv",):
            raise ConfigError(f"dataset kind must be one of "
                              f"{GENERATORS + ('csv',)}, got {self.kind!r}")
        if self.kind == "csv" and not self.path:
            raise ConfigError("dataset kind csv requires a path")
        if self.kind != "csv" and self.n < 2:
            raise ConfigError("dataset n must be at least 2")
        if not 0.0 <= self.flip_fraction < 1.0:
            raise ConfigError("flip_fraction must lie in [0, 1)")


@dataclass(frozen=True)
class ModelOptions:
    hidden: tuple = (64, 32)
    activation: str = "relu"
    seed: int = 0

    def __post_init__(self):
        if not self.hidden or any(h < 1 for h in self.hidden):
            raise ConfigError("hidden must be a nonempty list of positive ints")


@dataclass(frozen=True)
class AttackOptions:
    shadows: int = 5
    subset_fraction: float = 0.1
    shadow_epochs: int = 50
    attack_epochs: int = 100
    shadow_seed: int = 13
    net_seed: int = 17

    def __post_init__(self):
        if self.shadows < 1:
            raise ConfigError("attack shadows must be positive")
        if not 0.0 < self.subset_fraction <= 0.1:
            raise ConfigError("attack subset_fraction must lie in (0, 0.1]")


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelOptions = field(default_factory=ModelOptions)
    phases: tuple = (("epochs", 60),)  # replaced in __post_init__ default path
    shuffle_seed: int = 0
    methods: tuple = ("puma",)
    scenario: str = "random"
    fractions: tuple = (0.2, 0.4, 0.6, 0.8)
    kmeans_k: int = 5
    removal: RemovalConfig = field(default_factory=RemovalConfig)
    lissa: LissaConfig = field(default_factory=LissaConfig)
    attack: AttackOptions = field(default_factory=AttackOptions)
    sisa_shards: int = 5
    delta: float = 0.05
    repeats: int = 5
    seed: int = 0
    sweep_etas: tuple = ()
    calibration_eta: float = 1e-4
    calibration_k: int = 0  # 0: one tenth of n

    def __post_init__(self):
        if not self.methods:
            raise ConfigError("methods must not be empty")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown methods {bad}; choose from {METHODS}")
        if self.scenario not in ("ordered", "random"):
            raise ConfigError(f"scenario must be ordered or random, "
                              f"got {self.scenario!r}")
        if not self.fractions:
            raise ConfigError("fractions must not be empty")
        for f in self.fractions:
            if not 0.0 < f < 1.0:
                raise ConfigError(f"fraction {f} outside (0, 1)")
        if any(b <= a for a, b in zip(self.fractions, self.fractions[1:])):
            raise ConfigError("fractions must be strictly increasing")
        if not self.phases:
            raise ConfigError("train phases must not be empty")
        if self.delta <= 0:
            raise ConfigError("delta must be positive")
        if self.repeats < 1:
            raise ConfigError("repeats must be at least 1")
        if self.sisa_shards < 1:
            raise ConfigError("sisa_shards must be positive")
        if not 0.0 <= self.calibration_eta <= CALIBRATION_ETA_CAP:
            raise ConfigError(f"calibration_eta must lie in "
                              f"[0, {CALIBRATION_ETA_CAP}]")

    def train_configs(self, seed_offset=0, record_ledger=False):
        """One TrainConfig per phase; phase i shuffles with
        shuffle_seed + i + seed_offset."""
        return [TrainConfig(e, b, lr, shuffle_seed=self.shuffle_seed + i + seed_offset,
                            record_ledger=record_ledger)
                for i, (e, b, lr) in enumerate(self.phases)]


# ---------------------------------------------------------------------------
# INI parsing

_KNOWN = {
    "dataset": {"kind", "n", "noise", "seed", "eval_n", "path", "label_column",
                "flip_fraction"},
    "model": {"hidden", "activation", "seed"},
    "train": {"phases", "shuffle_seed"},
    "mark": {"scenario", "fractions", "kmeans_k"},
    "removal": {"methods", "eta", "l1", "l2", "pool_size", "lambda_box",
                "sisa_shards"},
    "lissa": {"depth", "damping", "scale", "repeats", "batch_size", "seed"},
    "attack": {"shadows", "subset_fraction", "shadow_epochs", "attack_epochs",
               "shadow_seed", "net_seed"},
    "experiment": {"delta", "repeats", "seed"},
    "sweep": {"etas"},
    "calibration": {"eta", "k"},
}


def _typed(section, key, raw, kind):
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key} = {raw!r}: expected {kind.__name__}") \
            from None
    return raw.strip()


def _split(raw):
    return [p.strip() for p in raw.split(",") if p.strip()]


def _parse_phases(raw):
    phases = []
    for part in _split(raw):
        bits = part.split(":")
        if len(bits) != 3:
            raise ConfigError(f"train phase {part!r}: expected epochs:batch:lr")
        try:
            phases.append((int(bits[0]), int(bits[1]), float(bits[2])))
        except ValueError:
            raise ConfigError(f"train phase {part!r}: bad number") from None
    return tuple(phases)


def loads(text):
    """Parse INI text into an ExperimentConfig."""
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"bad config syntax: {exc}") from None

    for section in cp.sections():
        if section not in _KNOWN:
            raise ConfigError(f"unknown section [{section}]")
        extra = set(cp[section]) - _KNOWN[section]
        if extra:
            raise ConfigError(f"unknown keys in [{section}]: {sorted(extra)}")

    def get(section, key, default, kind=str):
        if cp.has_option(section, key):
            return _typed(section, key, cp.get(section, key), kind)
        return default

    dataset = DatasetSpec(
        kind=get("dataset", "kind", "two_moons"),
        n=get("dataset", "n", 600, int),
        noise=get("dataset", "noise", 0.2, float),
        seed=get("dataset", "seed", 0, int),
        eval_n=get("dataset", "eval_n", 0, int),
        path=get("dataset", "path", ""),
        label_column=get("dataset", "label_column", "label"),
        flip_fraction=get("dataset", "flip_fraction", 0.0, float),
    )
    hidden_raw = get("model", "hidden", "64,32")
    try:
        hidden = tuple(int(h) for h in _split(hidden_raw))
    except ValueError:
        raise ConfigError(f"[model] hidden = {hidden_raw!r}: expected ints") \
            from None
    model = ModelOptions(hidden=hidden,
                         activation=get("model", "activation", "relu"),
                         seed=get("model", "seed", 0, int))
    phases = _parse_phases(get("train", "phases", "60:32:0.1"))
    fractions_raw = get("mark", "fractions", "0.2,0.4,0.6,0.8")
    try:
        fractions = tuple(float(f) for f in _split(fractions_raw))
    except ValueError:
        raise ConfigError(f"[mark] fractions = {fractions_raw!r}: expected floats") \
            from None
    methods = tuple(_split(get("removal", "methods", "puma")))
    try:
        removal = RemovalConfig(
            eta=get("removal", "eta", 0.025, float),
            l1=get("removal", "l1", 0.0, float),
            l2=get("removal", "l2", 1e-4, float),
            pool_size=get("removal", "pool_size", 512, int),
            lambda_box=get("removal", "lambda_box", 1.0, float),
        )
        lissa = LissaConfig(
            recursion_depth=get("lissa", "depth", 300, int),
            damping=get("lissa", "damping", 0.01, float),
            scale=get("lissa", "scale", 10.0, float),
            repeats=get("lissa", "repeats", 1, int),
            batch_size=get("lissa", "batch_size", 32, int),
            seed=get("lissa", "seed", 5, int),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    attack = AttackOptions(
        shadows=get("attack", "shadows", 5, int),
        subset_fraction=get("attack", "subset_fraction", 0.1, float),
        shadow_epochs=get("attack", "shadow_epochs", 50, int),
        attack_epochs=get("attack", "attack_epochs", 100, int),
        shadow_seed=get("attack", "shadow_seed", 13, int),
        net_seed=get("attack", "net_seed", 17, int),
    )
    etas_raw = get("sweep", "etas", "")
    try:
        sweep_etas = tuple(float(e) for e in _split(etas_raw))
    except ValueError:
        raise ConfigError(f"[sweep] etas = {etas_raw!r}: expected floats") \
            from None
    return ExperimentConfig(
        dataset=dataset,
        model=model,
        phases=phases,
        shuffle_seed=get("train", "shuffle_seed", 0, int),
        methods=methods,
        scenario=get("mark", "scenario", "random"),
        fractions=fractions,
        kmeans_k=get("mark", "kmeans_k", 5, int),
        removal=removal,
        lissa=lissa,
        attack=attack,
        sisa_shards=get("removal", "sisa_shards", 5, int),
        delta=get("experiment", "delta", 0.05, float),
        repeats=get("experiment", "repeats", 5, int),
        seed=get("experiment", "seed", 0, int),
        sweep_etas=sweep_etas,
        calibration_eta=get("calibration", "eta", 1e-4, float),
        calibration_k=get("calibration", "k", 0, int),
    )


def load(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return loads(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None


def to_dict(cfg):
    """Plain nested dict echo of a config, as embedded in reports."""
    return {
        "dataset": {
            "kind": cfg.dataset.kind, "n": cfg.dataset.n,
            "noise": cfg.dataset.noise, "seed": cfg.dataset.seed,
            "eval_n": cfg.dataset.eval_n, "path": cfg.dataset.path,
            "label_column": cfg.dataset.label_column,
            "flip_fraction": cfg.dataset.flip_fraction,
        },
        "model": {"hidden": list(cfg.model.hidden),
                  "activation": cfg.model.activation, "seed": cfg.model.seed},
        "train": {"phases": [list(p) for p in cfg.phases],
                  "shuffle_seed": cfg.shuffle_seed},
        "mark": {"scenario": cfg.scenario,
                 "fractions": list(cfg.fractions), "kmeans_k": cfg.kmeans_k},
        "removal": {"methods": list(cfg.methods), "eta": cfg.removal.eta,
                    "l1": cfg.removal.l1, "l2": cfg.removal.l2,
                    "pool_size": cfg.removal.pool_size,
                    "lambda_box": cfg.removal.lambda_box,
                    "sisa_shards": cfg.sisa_shards},
        "lissa": {"depth": cfg.lissa.recursion_depth,
                  "damping": cfg.lissa.damping, "scale": cfg.lissa.scale,
                  "repeats": cfg.lissa.repeats,
                  "batch_size": cfg.lissa.batch_size, "seed": cfg.lissa.seed},
        "attack": {"shadows": cfg.attack.shadows,
                   "subset_fraction": cfg.attack.subset_fraction,
                   "shadow_epochs": cfg.attack.shadow_epochs,
                   "attack_epochs": cfg.attack.attack_epochs,
                   "shadow_seed": cfg.attack.shadow_seed,
                   "net_seed": cfg.attack.net_seed},
        "experiment": {"delta": cfg.delta, "repeats": cfg.repeats,
                       "seed": cfg.seed},
        "sweep": {"etas": list(cfg.sweep_etas)},
        "calibration": {"eta": cfg.calibration_eta, "k": cfg.calibration_k},
    }
