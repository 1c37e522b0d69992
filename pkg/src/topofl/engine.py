"""
Server-side aggregation: topology-guided clustering, trust scoring,
intra-cluster weighting, inter-cluster blending, drift tracking, and the
FedAvg / FedProx / SCAFFOLD / pFedMe baselines.

All randomness comes from streams keyed by (master_seed, client_id, round,
purpose), so results do not depend on the order in which clients run.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from . import tda
from .errors import ConfigError, InputError
from .local_model import (ControlVariate, ModelParams, TrainConfig, accuracy,
                          augment_features, auc_roc, local_update, pfedme_update,
                          predict_proba)

METHODS = ("ptopofl", "fedavg", "fedprox", "scaffold", "pfedme")
BASELINES = METHODS[1:]
WEIGHTING_MODES = ("descriptor_exp", "wasserstein_softmax")

# rng purposes
_TRAIN, _DESCRIPTOR = 0, 1


def client_stream(master_seed, client_id, rnd, purpose):
    return np.random.default_rng([int(master_seed), int(client_id), int(rnd), int(purpose)])


# --------------------------------------------------------------------------
# descriptor-space geometry
# --------------------------------------------------------------------------

def normalize_descriptors(descs):
    """Row-wise l2 normalisation; zero rows stay zero."""
    descs = np.asarray(descs, dtype=float)
    norms = np.linalg.norm(descs, axis=1, keepdims=True)
    return np.divide(descs, norms, out=np.zeros_like(descs), where=norms > 0)


@dataclass(frozen=True)
class ClusterAssignment:
    labels: np.ndarray
    M: int

    def members(self, j):
        return np.flatnonzero(self.labels == j)

    def sizes(self):
        return np.bincount(self.labels, minlength=self.M)


def average_linkage(dist, M):
    """Agglomerate singletons until M clusters remain (average linkage).

    Among equally close pairs, the one with the lowest (min member index)
    pair merges first. Labels are numbered by each cluster's smallest member.
    """
    dist = np.asarray(dist, dtype=float)
    K = len(dist)
    if not 1 <= M <= K:
        raise ConfigError(f"need 1 <= M <= K, got M={M}, K={K}")
    clusters = [[k] for k in range(K)]
    while len(clusters) > M:
        best = None
        for a in range(len(clusters)):
            for b in range(a + 1, len(clusters)):
                d = dist[np.ix_(clusters[a], clusters[b])].mean()
                key = (d, min(clusters[a]), min(clusters[b]))
                if best is None or key < best[0]:
                    best = (key, a, b)
        _, a, b = best
        clusters[a] = sorted(clusters[a] + clusters[b])
        del clusters[b]
    clusters.sort(key=min)
    labels = np.empty(K, dtype=int)
    for j, members in enumerate(clusters):
        labels[members] = j
    return ClusterAssignment(labels, M)


def cluster_clients(descs, M):
    """Average-linkage clustering on Euclidean distances of normalised descriptors."""
    descs = np.asarray(descs, dtype=float)
    if descs.ndim != 2 or len(descs) == 0:
        raise InputError("need a (K, m) descriptor matrix")
    if M > len(descs):
        raise ConfigError(f"M={M} exceeds the number of clients K={len(descs)}")
    z = normalize_descriptors(descs)
    dist = np.linalg.norm(z[:, None, :] - z[None, :, :], axis=2)
    return average_linkage(dist, M)


@dataclass(frozen=True)
class TrustReport:
    delta: np.ndarray
    z: np.ndarray
    trust: np.ndarray
    flagged: frozenset


def trust_scores(descs, tau=2.0):
    """Anomaly z-scores of mean descriptor distance and the resulting trust weights.

    Raw (unnormalised) descriptors are used; z uses the population std and is
    all zeros when that std is below 1e-12.
    """
    descs = np.asarray(descs, dtype=float)
    K = len(descs)
    if K < 2:
        raise ConfigError("trust scoring needs at least 2 clients")
    dist = np.linalg.norm(descs[:, None, :] - descs[None, :, :], axis=2)
    delta = dist.sum(axis=1) / (K - 1)
    sigma = delta.std()
    if sigma < 1e-12:
        z = np.zeros(K)
    else:
        z = (delta - delta.mean()) / sigma
    trust = np.exp(-np.maximum(z - 1.0, 0.0))
    flagged = frozenset(int(k) for k in np.flatnonzero(z > tau))
    return TrustReport(delta, z, trust, flagged)


def intra_cluster_weights(descs, sizes, trust, assignment, use_exp=True):
    """w_k proportional to n_k * exp(-|phi_k - centroid_j|) * t_k, normalised per cluster."""
    z = normalize_descriptors(descs)
    sizes = np.asarray(sizes, dtype=float)
    trust = np.asarray(trust, dtype=float)
    if np.any(sizes <= 0):
        raise InputError("client sizes must be positive")
    raw = sizes * trust
    if use_exp:
        for j in range(assignment.M):
            idx = assignment.members(j)
            centroid = z[idx].mean(axis=0)
            raw[idx] *= np.exp(-np.linalg.norm(z[idx] - centroid, axis=1))
    return _normalize_within(raw, assignment)


def _normalize_within(raw, assignment):
    w = np.zeros(len(raw))
    for j in range(assignment.M):
        idx = assignment.members(j)
        w[idx] = raw[idx] / raw[idx].sum()
    return w


def softmax_cluster_weights(descs, assignment, lam):
    """Per-cluster softmax of -lambda * distance to the cluster's descriptor barycenter."""
    z = normalize_descriptors(descs)
    w = np.zeros(len(z))
    for j in range(assignment.M):
        idx = assignment.members(j)
        bary = tda.descriptor_barycenter(z[idx])
        w[idx] = wasserstein_softmax_weights(np.linalg.norm(z[idx] - bary, axis=1), lam)
    return w


def wasserstein_softmax_weights(diagram_dists, lam):
    """alpha_k proportional to exp(-lambda * dist_k)."""
    d = np.asarray(diagram_dists, dtype=float)
    if lam < 0 or np.any(d < 0):
        raise ConfigError("lambda and distances must be non-negative")
    logits = -lam * d
    e = np.exp(logits - logits.max())
    return e / e.sum()


def aggregate_cluster(models, weights):
    """Weighted average of parameter vectors."""
    flats = [m.flat() for m in models]
    if len({len(f) for f in flats}) != 1:
        raise InputError("cannot average models of different dimensions")
    weights = np.asarray(weights, dtype=float)
    if len(weights) != len(flats) or abs(weights.sum() - 1.0) > 1e-9:
        raise InputError("need one weight per model, summing to 1")
    return ModelParams.from_flat(weights @ np.vstack(flats))


def blend_clusters(cluster_models, cluster_sizes, beta):
    """theta*_j = (1 - beta) theta_j + beta * sum_j (|C_j| / K) theta_j."""
    if not 0 <= beta <= 1:
        raise ConfigError("beta must be in [0, 1]")
    sizes = np.asarray(cluster_sizes, dtype=float)
    flats = np.vstack([m.flat() for m in cluster_models])
    consensus = (sizes / sizes.sum()) @ flats
    return [ModelParams.from_flat((1 - beta) * f + beta * consensus) for f in flats]


# --------------------------------------------------------------------------
# signature tracking
# --------------------------------------------------------------------------

class SignatureHistory:
    """Descriptor of every client at every recorded round (rounds numbered from 1)."""

    def __init__(self):
        self._rounds = {}

    def record(self, client_id, desc):
        self._rounds.setdefault(client_id, []).append(np.asarray(desc, dtype=float).copy())

    def rounds(self, client_id):
        return list(self._rounds.get(client_id, []))

    def clients(self):
        return sorted(self._rounds)


def topological_drift(history, client, normalize=False):
    """Mean distance of each recorded signature to the client's first one."""
    sigs = history.rounds(client)
    if not sigs:
        raise InputError(f"no signatures recorded for client {client}")
    sigs = np.vstack(sigs)
    if normalize:
        sigs = normalize_descriptors(sigs)
    return float(np.mean(np.linalg.norm(sigs - sigs[0], axis=1)))


def variance_identity_check(grads, alpha):
    """Both sides of sum a_k |g_k - g_a|^2 = sum a_k |g_k - g|^2 - |g_a - g|^2."""
    g = np.asarray(grads, dtype=float)
    a = np.asarray(alpha, dtype=float)
    if np.any(a < 0) or abs(a.sum() - 1) > 1e-9:
        raise InputError("alpha must be non-negative and sum to 1")
    g_uniform = g.mean(axis=0)
    g_alpha = a @ g
    lhs = float(a @ np.sum((g - g_alpha) ** 2, axis=1))
    rhs = float(a @ np.sum((g - g_uniform) ** 2, axis=1) - np.sum((g_alpha - g_uniform) ** 2))
    return lhs, rhs


# --------------------------------------------------------------------------
# rounds
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class EngineConfig:
    M: int = 2
    beta_blend: float = 0.3
    tau: float = 2.0
    n_sub: int = 80
    L: int = 20
    lambda_softmax: float = 1.0
    weighting_mode: str = "descriptor_exp"
    use_trust: bool = True
    use_exp: bool = True
    augment: bool = True
    refresh_descriptors: bool = False
    drift_threshold: float = 1.0
    drift_lr_multiplier: float = 1.0
    train: TrainConfig = field(default_factory=TrainConfig)
    master_seed: int = 0

    def __post_init__(self):
        if self.weighting_mode not in WEIGHTING_MODES:
            raise ConfigError(f"unknown weighting_mode {self.weighting_mode!r}")
        if self.M < 1:
            raise ConfigError("M must be >= 1")
        if not 0 <= self.beta_blend <= 1:
            raise ConfigError("beta_blend must be in [0, 1]")


@dataclass
class RoundRecord:
    round: int
    method: str
    scenario: str
    seed: int
    auc_global: float
    acc_global: float
    per_client_auc: list
    trust: list
    clusters: list
    drift: list
    flagged: list = field(default_factory=list)
    wallclock_ms: int = 0


@dataclass
class ClientState:
    client_id: int
    data: object  # scenarios.ClientData
    descriptor: np.ndarray = None
    n_points: int = 0
    model: ModelParams = None
    cv: ControlVariate = None
    personal: ModelParams = None
    lr_boost: bool = False

    @property
    def n(self):
        return len(self.data.train)


def topology_stats(desc, n_points):
    """Client constants for feature augmentation: H0/H1 entropy and the
    mid-scale H0 Betti number as a fraction of the points used."""
    f = tda.descriptor_fields(desc)
    b0 = f["b0_curve"]
    return f["h0_entropy"], f["h1_entropy"], b0[len(b0) // 2] / max(n_points, 1)


def client_features(state, split, augment):
    ds = getattr(state.data, split)
    if not augment:
        return ds.features
    centroid = state.data.train.features.mean(axis=0)
    return augment_features(ds.features, centroid, *topology_stats(state.descriptor, state.n_points))


def client_dataset(state, augment):
    ds = state.data.train
    if not augment:
        return ds
    return augment_features(ds, ds.features.mean(axis=0),
                            *topology_stats(state.descriptor, state.n_points))


def compute_descriptor(state, cfg, rnd):
    rng = client_stream(cfg.master_seed, state.client_id, rnd, _DESCRIPTOR)
    x = state.data.train.features
    state.descriptor = tda.descriptor(x, n_sub=cfg.n_sub, L=cfg.L, rng=rng)
    state.n_points = min(len(x), cfg.n_sub)
    return state.descriptor


def evaluate(states, serving, augment=False, honest_only=True):
    """Pooled and per-client AUC / accuracy of each client's serving model."""
    scores, labels, per_client = [], [], []
    for s in states:
        if honest_only and s.data.adversarial:
            per_client.append(None)
            continue
        p = predict_proba(serving[s.client_id], client_features(s, "test", augment))
        y = s.data.test.labels
        scores.append(p)
        labels.append(y)
        per_client.append(auc_roc(p, y))
    if not scores:
        return None, None, per_client
    scores, labels = np.concatenate(scores), np.concatenate(labels)
    return auc_roc(scores, labels), accuracy(scores, labels), per_client


@dataclass
class PTopoFLState:
    clients: list
    cfg: EngineConfig
    scenario: str = ""
    seed: int = 0
    round: int = 0
    assignment: ClusterAssignment = None
    cluster_models: list = None
    history: SignatureHistory = field(default_factory=SignatureHistory)
    recluster: bool = False
    last_trust: TrustReport = None

    @classmethod
    def create(cls, client_data, cfg, scenario="", seed=0):
        return cls([ClientState(c.client_id, c) for c in sorted(client_data, key=lambda c: c.client_id)],
                   cfg, scenario=scenario, seed=seed)

    def model_dim(self):
        return self.clients[0].data.train.dim + (4 if self.cfg.augment else 0)

    def serving_models(self):
        if self.cluster_models is None:
            zero = ModelParams.zeros(self.model_dim())
            return {c.client_id: zero for c in self.clients}
        return {c.client_id: self.cluster_models[self.assignment.labels[i]]
                for i, c in enumerate(self.clients)}


def run_round(state):
    """One full round: descriptors, local training, clustering, trust,
    intra-cluster aggregation, blending, signature tracking, evaluation."""
    cfg = state.cfg
    r = state.round
    t0 = time.perf_counter()
    start_models = state.serving_models()

    # client side
    local = []
    for c in state.clients:
        if c.descriptor is None or cfg.refresh_descriptors:
            compute_descriptor(c, cfg, r)
        tcfg = cfg.train
        if c.lr_boost and cfg.drift_lr_multiplier != 1.0:
            tcfg = TrainConfig(**{**tcfg.__dict__,
                                  "learning_rate": tcfg.learning_rate * cfg.drift_lr_multiplier})
        data = client_dataset(c, cfg.augment)
        model, _ = local_update(start_models[c.client_id], data, tcfg, mode="plain",
                                rng=client_stream(cfg.master_seed, c.client_id, r, _TRAIN))
        c.model = model
        local.append(model)

    # server side
    descs = np.vstack([c.descriptor for c in state.clients])
    sizes = np.array([c.n for c in state.clients], dtype=float)
    if state.assignment is None or state.recluster:
        state.assignment = cluster_clients(descs, cfg.M)
        state.recluster = False
    assignment = state.assignment

    K = len(state.clients)
    report = trust_scores(descs, cfg.tau) if K >= 2 else None
    trust = report.trust if (report is not None and cfg.use_trust) else np.ones(K)
    state.last_trust = report

    if cfg.weighting_mode == "descriptor_exp":
        weights = intra_cluster_weights(descs, sizes, trust, assignment, use_exp=cfg.use_exp)
    else:
        weights = softmax_cluster_weights(descs, assignment, cfg.lambda_softmax)

    cluster_models = []
    for j in range(assignment.M):
        idx = assignment.members(j)
        cluster_models.append(aggregate_cluster([local[i] for i in idx], weights[idx]))
    state.cluster_models = blend_clusters(cluster_models, assignment.sizes(), cfg.beta_blend)

    drift = []
    for c in state.clients:
        state.history.record(c.client_id, c.descriptor)
        d = topological_drift(state.history, c.client_id, normalize=True)
        c.lr_boost = d > cfg.drift_threshold
        drift.append(d)
    if any(c.lr_boost for c in state.clients):
        state.recluster = True

    auc, acc, per_client = evaluate(state.clients, state.serving_models(), augment=cfg.augment)
    record = RoundRecord(
        round=r + 1, method="ptopofl", scenario=state.scenario, seed=state.seed,
        auc_global=auc, acc_global=acc, per_client_auc=per_client,
        trust=[float(t) for t in trust], clusters=[int(v) for v in assignment.labels],
        drift=drift, flagged=sorted(report.flagged) if report else [],
        wallclock_ms=int(round(1000 * (time.perf_counter() - t0))),
    )
    state.round += 1
    return state, record


@dataclass
class BaselineState:
    method: str
    clients: list
    cfg: EngineConfig
    scenario: str = ""
    seed: int = 0
    round: int = 0
    global_model: ModelParams = None
    c_global: np.ndarray = None

    @classmethod
    def create(cls, method, client_data, cfg, scenario="", seed=0):
        if method not in BASELINES:
            raise ConfigError(f"unknown baseline {method!r}; expected one of {BASELINES}")
        clients = [ClientState(c.client_id, c) for c in sorted(client_data, key=lambda c: c.client_id)]
        d = clients[0].data.train.dim
        state = cls(method, clients, cfg, scenario=scenario, seed=seed,
                    global_model=ModelParams.zeros(d))
        if method == "scaffold":
            state.c_global = np.zeros(d + 1)
            for c in clients:
                c.cv = ControlVariate.zeros(d + 1)
        return state

    def serving_models(self):
        if self.method == "pfedme":
            return {c.client_id: (c.personal if c.personal is not None else self.global_model)
                    for c in self.clients}
        return {c.client_id: self.global_model for c in self.clients}


def baseline_round(state):
    """One round of FedAvg, FedProx, SCAFFOLD or pFedMe (full participation)."""
    cfg, r, method = state.cfg, state.round, state.method
    if method not in BASELINES:
        raise ConfigError(f"unknown baseline {method!r}")
    t0 = time.perf_counter()
    start = state.global_model
    local, cv_deltas = [], []
    for c in state.clients:
        rng = client_stream(cfg.master_seed, c.client_id, r, _TRAIN)
        data = c.data.train
        if method == "fedavg":
            model, _ = local_update(start, data, cfg.train, mode="plain", rng=rng)
        elif method == "fedprox":
            model, _ = local_update(start, data, cfg.train, mode="prox", rng=rng, global_params=start)
        elif method == "scaffold":
            cv = ControlVariate(c.cv.c_local, state.c_global)
            model, new_cv = local_update(start, data, cfg.train, mode="scaffold", cv=cv, rng=rng)
            cv_deltas.append(new_cv.c_local - c.cv.c_local)
            c.cv = ControlVariate(new_cv.c_local, state.c_global)
        else:
            model, c.personal = pfedme_update(start, data, cfg.train, rng=rng, personal=c.personal)
        c.model = model
        local.append(model)

    sizes = np.array([c.n for c in state.clients], dtype=float)
    state.global_model = aggregate_cluster(local, sizes / sizes.sum())
    if method == "scaffold":
        state.c_global = state.c_global + np.mean(cv_deltas, axis=0)

    auc, acc, per_client = evaluate(state.clients, state.serving_models(), augment=False)
    record = RoundRecord(
        round=r + 1, method=method, scenario=state.scenario, seed=state.seed,
        auc_global=auc, acc_global=acc, per_client_auc=per_client,
        trust=[1.0] * len(state.clients), clusters=[0] * len(state.clients),
        drift=[0.0] * len(state.clients),
        wallclock_ms=int(round(1000 * (time.perf_counter() - t0))),
    )
    state.round += 1
    return state, record
