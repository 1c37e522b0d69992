"""
Seeded synthetic federations.

Every client draws its informative features from one of two Gaussian-mixture
templates (a diffuse one and a multi-blob one), with client-specific shifts
of the component means. Labels come from a logistic teacher whose weights
depend on the template, with the intercept bisected so each client's
positive rate hits its target.
"""

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import expit

from .errors import ConfigError, GenerationError
from .local_model import LabeledDataset

RATE_TOLERANCE = 0.02
BISECTION_STEPS = 50
TEST_FRACTION = 0.25
ADVERSARY_NOISE_SCALE = 5.0
BLOB_COUNT = 5
BLOB_RADIUS = 3.0
BLOB_SPREAD = 0.45
CLIENT_SHIFT = 0.5
NUISANCE_SCALE = 1.0


@dataclass(frozen=True)
class ScenarioConfig:
    name: str = "healthcare"
    K: int = 8
    d: int = 20
    d_informative: int = 10
    size_range: tuple = (60, 250)
    positive_rate_range: tuple = (0.10, 0.45)
    adversarial_ids: tuple = ()
    flip_rate: float = 0.4
    seed: int = 0
    teacher_scale: float = 1.5
    template_shift: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "size_range", tuple(int(v) for v in self.size_range))
        object.__setattr__(self, "positive_rate_range",
                           tuple(float(v) for v in self.positive_rate_range))
        object.__setattr__(self, "adversarial_ids",
                           tuple(sorted(int(v) for v in self.adversarial_ids)))
        if self.K < 1 or self.d < 1:
            raise ConfigError("K and d must be >= 1")
        if not 1 <= self.d_informative <= self.d:
            raise ConfigError("need 1 <= d_informative <= d")
        lo, hi = self.size_range
        if not 4 <= lo <= hi:
            raise ConfigError("size_range must satisfy 4 <= lo <= hi")
        rlo, rhi = self.positive_rate_range
        if not 0 < rlo <= rhi < 1:
            raise ConfigError("positive_rate_range must lie inside (0, 1)")
        if not 0 <= self.flip_rate <= 1:
            raise ConfigError("flip_rate must be in [0, 1]")
        if any(k < 0 or k >= self.K for k in self.adversarial_ids):
            raise ConfigError("adversarial_ids must be client indices in [0, K)")


def healthcare(seed=0, adversarial_ids=(2, 5), flip_rate=0.4):
    """8 hospitals, 20 features (10 informative), mortality 10-45%."""
    return ScenarioConfig(name="healthcare", K=8, d=20, d_informative=10,
                          size_range=(60, 250), positive_rate_range=(0.10, 0.45),
                          adversarial_ids=adversarial_ids, flip_rate=flip_rate, seed=seed)


def benchmark(seed=0):
    """10 clients, 20 features (12 informative), class balance U(0.1, 0.9)."""
    return ScenarioConfig(name="benchmark", K=10, d=20, d_informative=12,
                          size_range=(60, 250), positive_rate_range=(0.10, 0.90),
                          adversarial_ids=(), flip_rate=0.0, seed=seed)


PRESETS = {"healthcare": healthcare, "benchmark": benchmark}


def preset(name, **overrides):
    if name not in PRESETS:
        raise ConfigError(f"unknown scenario {name!r}; expected one of {sorted(PRESETS)}")
    return replace(PRESETS[name](), **overrides)


@dataclass
class ClientData:
    client_id: int
    train: LabeledDataset
    test: LabeledDataset
    template: int
    target_rate: float
    adversarial: bool = False
    clean_train_labels: np.ndarray = field(default=None, repr=False)


def _stream(seed, *key):
    return np.random.default_rng([int(seed), *[int(k) for k in key]])


def _template_means(seed, d_inf):
    """Component means for template 0 (diffuse) and template 1 (five blobs)."""
    rng = _stream(seed, 10_000)
    blobs = rng.normal(size=(BLOB_COUNT, d_inf))
    blobs *= BLOB_RADIUS / np.linalg.norm(blobs, axis=1, keepdims=True)
    return {0: (np.zeros((1, d_inf)), 1.0), 1: (blobs, BLOB_SPREAD)}


def _teachers(seed, d_inf, scale, shift):
    rng = _stream(seed, 10_001)
    shared = rng.normal(size=d_inf)
    shared *= scale / np.linalg.norm(shared)
    out = {}
    for t in (0, 1):
        dev = rng.normal(size=d_inf)
        dev *= shift * scale / np.linalg.norm(dev)
        out[t] = shared + dev
    return out


def _fit_intercept(logits, u, target):
    """Bisect the intercept so mean(u < sigmoid(logits + b)) hits ``target``."""
    lo, hi = -30.0, 30.0
    for _ in range(BISECTION_STEPS):
        b = 0.5 * (lo + hi)
        rate = np.mean(u < expit(logits + b))
        if abs(rate - target) <= RATE_TOLERANCE:
            return b
        if rate < target:
            lo = b
        else:
            hi = b
    raise GenerationError(f"could not reach positive rate {target:.3f} within "
                          f"{RATE_TOLERANCE} after {BISECTION_STEPS} bisection steps")


def _split(y, rng):
    """Indices of a 25% test split, stratified when both classes are present."""
    n = len(y)
    if 0 < y.sum() < n:
        test = []
        for cls in (0, 1):
            idx = np.flatnonzero(y == cls)
            rng.shuffle(idx)
            test.extend(idx[:int(round(TEST_FRACTION * len(idx)))])
        test = np.sort(np.asarray(test, dtype=int))
    else:
        test = np.sort(rng.permutation(n)[:int(round(TEST_FRACTION * n))])
    if len(test) == 0:
        # tiny clients: keep one held-out row so evaluation is defined
        test = rng.permutation(n)[:1]
    train = np.setdiff1d(np.arange(n), test)
    return train, test


def apply_label_flip(data, flip_rate, rng=None):
    """Invert the labels of round(flip_rate * n) rows chosen without replacement."""
    if not 0 <= flip_rate <= 1:
        raise ConfigError("flip_rate must be in [0, 1]")
    rng = np.random.default_rng(rng)
    n = len(data)
    k = int(round(flip_rate * n))
    idx = rng.choice(n, size=k, replace=False)
    labels = data.labels.copy()
    labels[idx] = 1 - labels[idx]
    return LabeledDataset(data.features.copy(), labels)


def generate_scenario(cfg):
    """Build every client's train/test split for ``cfg``."""
    means, spreads = {}, {}
    for t, (m, s) in _template_means(cfg.seed, cfg.d_informative).items():
        means[t], spreads[t] = m, s
    teachers = _teachers(cfg.seed, cfg.d_informative, cfg.teacher_scale, cfg.template_shift)
    adversaries = set(cfg.adversarial_ids)
    clients = []
    for k in range(cfg.K):
        rng = _stream(cfg.seed, k)
        template = k % 2
        n = int(rng.integers(cfg.size_range[0], cfg.size_range[1] + 1))
        target = float(rng.uniform(*cfg.positive_rate_range))

        comp_means = means[template] + rng.normal(scale=CLIENT_SHIFT, size=(1, cfg.d_informative))
        comp = rng.integers(len(comp_means), size=n)
        inf = comp_means[comp] + spreads[template] * rng.normal(size=(n, cfg.d_informative))
        nuisance = NUISANCE_SCALE * rng.normal(size=(n, cfg.d - cfg.d_informative))

        logits = inf @ teachers[template]
        u = rng.uniform(size=n)
        b = _fit_intercept(logits, u, target)
        y = (u < expit(logits + b)).astype(int)

        x = np.column_stack([inf, nuisance])
        if k in adversaries:
            # poisoned sites also carry corrupted feature records; a pure
            # translation would be an isometry and leave the topology unchanged
            x = x + ADVERSARY_NOISE_SCALE * rng.normal(size=x.shape)

        tr, te = _split(y, rng)
        train = LabeledDataset(x[tr], y[tr])
        clean = train.labels.copy()
        if k in adversaries and cfg.flip_rate > 0:
            train = apply_label_flip(train, cfg.flip_rate, rng)
        clients.append(ClientData(k, train, LabeledDataset(x[te], y[te]), template, target,
                                  adversarial=k in adversaries, clean_train_labels=clean))
    return clients


def adversaries_for_rate(K, rate, seed):
    """round(rate * K) adversarial client ids, drawn from a seeded stream."""
    if not 0 <= rate <= 1:
        raise ConfigError("attack rate must be in [0, 1]")
    m = int(round(rate * K))
    ids = _stream(seed, 10_002).permutation(K)[:m]
    return tuple(sorted(int(i) for i in ids))


def export_csv(clients, out_dir):
    """One CSV per client (train + test rows) with a split column."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for c in clients:
        d = c.train.dim
        path = out_dir / f"client_{c.client_id:02d}.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{i}" for i in range(d)] + ["label", "split"])
            for split, ds in (("train", c.train), ("test", c.test)):
                for row, lab in zip(ds.features, ds.labels):
                    w.writerow([repr(float(v)) for v in row] + [int(lab), split])
        paths.append(path)
    return paths
