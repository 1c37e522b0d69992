"""Logistic-regression clients: loss, SGD variants, and evaluation metrics."""

from dataclasses import dataclass, replace

import numpy as np
from scipy.special import expit
from scipy.stats import rankdata

from .errors import ConfigError, InputError

MODES = ("plain", "prox", "scaffold", "pfedme")


@dataclass(frozen=True)
class ModelParams:
    weights: np.ndarray
    bias: float = 0.0

    @classmethod
    def zeros(cls, d):
        return cls(np.zeros(d), 0.0)

    @classmethod
    def from_flat(cls, flat):
        flat = np.asarray(flat, dtype=float)
        return cls(flat[:-1].copy(), float(flat[-1]))

    def flat(self):
        """Wire layout: [w_1, ..., w_d, b]."""
        return np.append(self.weights, self.bias)

    @property
    def dim(self):
        return len(self.weights)


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.features, dtype=float)
        y = np.asarray(self.labels).astype(int).reshape(-1)
        if x.ndim != 2 or len(x) != len(y) or len(x) == 0:
            raise InputError("dataset needs an (n, d) feature matrix and n labels, n >= 1")
        if not np.all((y == 0) | (y == 1)):
            raise InputError("labels must be binary 0/1")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self):
        return self.features.shape[1]

    def subset(self, idx):
        return LabeledDataset(self.features[idx], self.labels[idx])


@dataclass
class ControlVariate:
    c_local: np.ndarray
    c_global: np.ndarray

    @classmethod
    def zeros(cls, size):
        return cls(np.zeros(size), np.zeros(size))


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    local_epochs: int = 5
    batch_size: int = 32
    l2_reg: float = 1.0
    prox_mu: float = 0.1
    pfedme_lambda: float = 15.0
    pfedme_inner_steps: int = 5
    pfedme_outer_lr: float = 0.05

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.local_epochs < 1 or self.batch_size < 1 or self.pfedme_inner_steps < 1:
            raise ConfigError("local_epochs, batch_size and pfedme_inner_steps must be >= 1")
        if self.l2_reg < 0 or self.prox_mu < 0 or self.pfedme_lambda < 0:
            raise ConfigError("regularisation strengths must be >= 0")


def augment_features(data, centroid, h0_entropy, h1_entropy, betti_mid):
    """Append four topology columns to the feature matrix.

    Column 1 is each row's l2 distance to ``centroid``; columns 2-4 broadcast
    the client-level H0 entropy, H1 entropy and mid-scale Betti number.
    """
    x = data.features if isinstance(data, LabeledDataset) else np.asarray(data, dtype=float)
    centroid = np.asarray(centroid, dtype=float).reshape(-1)
    if centroid.shape[0] != x.shape[1]:
        raise InputError(f"centroid has dim {centroid.shape[0]}, features have {x.shape[1]}")
    dist = np.linalg.norm(x - centroid, axis=1)
    const = np.broadcast_to([h0_entropy, h1_entropy, betti_mid], (len(x), 3))
    out = np.column_stack([x, dist, const])
    if isinstance(data, LabeledDataset):
        return LabeledDataset(out, data.labels)
    return out


def predict_proba(params, features):
    x = np.asarray(features, dtype=float)
    if x.ndim != 2 or x.shape[1] != params.dim:
        raise InputError(f"expected (n, {params.dim}) features, got {x.shape}")
    return expit(x @ params.weights + params.bias)


def loss_and_gradient(params, data, cfg, global_params=None, n_effective=None):
    """Regularised logistic loss and its gradient w.r.t. the flat [w, b] vector.

    loss = mean BCE + (l2_reg / 2) |w|^2 / n_effective + (prox_mu / 2) |theta - theta_g|^2

    The l2 term covers weights only. ``n_effective`` defaults to the size of
    ``data``; minibatch callers pass the full client size so the penalty keeps
    its per-client scale. The proximal term is active when ``global_params``
    is given and prox_mu > 0.
    """
    x, y = data.features, data.labels
    n = len(y)
    n_eff = n if n_effective is None else n_effective
    z = x @ params.weights + params.bias
    # log(1 + e^z) - y z, written stably
    loss = float(np.mean(np.logaddexp(0.0, z) - y * z))
    resid = expit(z) - y
    grad = np.append(x.T @ resid / n, resid.mean())

    if cfg.l2_reg > 0:
        loss += 0.5 * cfg.l2_reg * float(params.weights @ params.weights) / n_eff
        grad[:-1] += cfg.l2_reg * params.weights / n_eff
    if global_params is not None and cfg.prox_mu > 0:
        diff = params.flat() - global_params.flat()
        loss += 0.5 * cfg.prox_mu * float(diff @ diff)
        grad += cfg.prox_mu * diff
    return loss, grad


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def local_update(params, data, cfg, mode="plain", cv=None, rng=None, global_params=None):
    """Run one round of local training.

    Returns ``(new_params, new_cv)``; ``new_cv`` is only set in scaffold mode.
    In pfedme mode the returned params are the local omega iterate; use
    :func:`pfedme_update` to also get the personalised model.
    """
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}")
    if mode == "pfedme":
        omega, _ = pfedme_update(params, data, cfg, rng)
        return omega, None
    if mode == "scaffold" and cv is None:
        raise ConfigError("scaffold mode needs a control variate")
    rng = np.random.default_rng(rng)
    anchor = params if mode == "prox" else None
    if mode == "prox" and cfg.prox_mu > 0 and global_params is not None:
        anchor = global_params
    n = len(data)
    theta = params.flat()
    steps = 0
    correction = (cv.c_global - cv.c_local) if mode == "scaffold" else None
    for _ in range(cfg.local_epochs):
        for idx in _batches(n, cfg.batch_size, rng):
            cur = ModelParams.from_flat(theta)
            _, g = loss_and_gradient(cur, data.subset(idx), cfg,
                                     global_params=anchor, n_effective=n)
            if correction is not None:
                g = g + correction
            theta = theta - cfg.learning_rate * g
            steps += 1
    new = ModelParams.from_flat(theta)
    if mode != "scaffold":
        return new, None
    # option II control-variate refresh
    c_local = cv.c_local - cv.c_global + (params.flat() - theta) / (cfg.learning_rate * steps)
    return new, ControlVariate(c_local, cv.c_global.copy())


def pfedme_update(omega, data, cfg, rng=None, personal=None):
    """Moreau-envelope local training.

    For every minibatch the personalised model theta_hat approximately solves
    min F_k(theta) + (lambda / 2) |theta - omega|^2 with a few gradient
    steps, then omega moves toward it. Returns ``(omega, theta_hat)``.
    """
    if not cfg.pfedme_lambda > 0:
        raise ConfigError("pfedme needs pfedme_lambda > 0")
    rng = np.random.default_rng(rng)
    lam = cfg.pfedme_lambda
    n = len(data)
    w = omega.flat()
    theta = w.copy() if personal is None else personal.flat()
    plain = replace(cfg, prox_mu=0.0)
    for _ in range(cfg.local_epochs):
        for idx in _batches(n, cfg.batch_size, rng):
            batch = data.subset(idx)
            for _ in range(cfg.pfedme_inner_steps):
                _, g = loss_and_gradient(ModelParams.from_flat(theta), batch, plain, n_effective=n)
                theta = theta - cfg.learning_rate * (g + lam * (theta - w))
            w = w - cfg.pfedme_outer_lr * lam * (w - theta)
    return ModelParams.from_flat(w), ModelParams.from_flat(theta)


def auc_roc(scores, labels):
    """Mann-Whitney AUC with half credit for ties; None if one class is absent."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(int)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def accuracy(scores, labels, threshold=0.5):
    labels = np.asarray(labels).astype(int)
    return float(np.mean((np.asarray(scores) >= threshold).astype(int) == labels))
