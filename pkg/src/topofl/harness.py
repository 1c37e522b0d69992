"""
Config-driven experiment runs: method comparison, attack-rate sweep,
ablations, signature drift and the privacy report.

Every runner returns plain row dicts and the CLI writes them as CSV. Rows
carry no timing information, so identical config and seed give
byte-identical files; wall-clock figures go to a separate JSON sidecar.
"""

import csv
import io
import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import engine, privacy, scenarios, tda
from .errors import ConfigError
from .local_model import TrainConfig

ROUND_FIELDS = ["method", "scenario", "seed", "round", "auc_global", "acc_global",
                "per_client_auc", "trust", "clusters", "drift", "flagged"]
SUMMARY_FIELDS = ["method", "seed", "final_auc", "best_auc", "convergence_round"]
SWEEP_FIELDS = ["attack_rate", "n_adversaries"] + ROUND_FIELDS
SWEEP_SUMMARY_FIELDS = ["attack_rate", "method", "n_seeds", "mean_final_auc", "std_final_auc"]
ABLATION_FIELDS = ["variant"] + ROUND_FIELDS
ABLATION_SUMMARY_FIELDS = ["variant", "n_seeds", "mean_final_auc", "std_final_auc"]
DRIFT_FIELDS = ["seed", "round", "client_id", "adversarial", "h0_entropy", "h1_entropy",
                "drift", "drift_flag", "cluster"]
PRIVACY_FIELDS = ["client_id", "n", "d", "p", "rho_grad", "rho_topo", "mi_grad", "mi_topo"]

ABLATION_VARIANTS = ("full", "no_clustering", "no_blending", "no_trust")
CONVERGENCE_FRACTION = 0.95

_TRAIN_KEYS = tuple(f.name for f in fields(TrainConfig))


@dataclass
class ExperimentConfig:
    scenario: str = "healthcare"
    method: str = "ptopofl"
    methods: list = field(default_factory=lambda: list(engine.METHODS))
    rounds: int = 15
    M: int = 2
    beta_blend: float = 0.3
    tau: float = 2.0
    n_sub: int = 80
    L: int = tda.BETTI_RESOLUTION
    lambda_softmax: float = 1.0
    weighting_mode: str = "descriptor_exp"
    use_trust: bool = True
    use_exp: bool = True
    augment: bool = True
    drift_threshold: float = 1.0
    drift_lr_multiplier: float = 1.0
    learning_rate: float = 0.05
    local_epochs: int = 5
    batch_size: int = 32
    l2_reg: float = 1.0
    prox_mu: float = 0.1
    pfedme_lambda: float = 15.0
    pfedme_inner_steps: int = 5
    pfedme_outer_lr: float = 0.05
    adversarial_ids: list = None
    flip_rate: float = None
    master_seed: int = 0
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    attack_rates: list = field(default_factory=lambda: [0.0, 0.1, 0.2, 0.3, 0.4, 0.5])
    sweep_methods: list = field(default_factory=lambda: ["ptopofl", "fedavg"])
    sweep_tau: float = 1.8
    drift_rounds: int = 20
    alpha_c: float = privacy.DEFAULT_ALPHA_C
    output_dir: str = "results"

    def __post_init__(self):
        if self.scenario not in scenarios.PRESETS:
            raise ConfigError(f"unknown scenario {self.scenario!r}")
        for m in [self.method, *self.methods, *self.sweep_methods]:
            if m not in engine.METHODS:
                raise ConfigError(f"unknown method {m!r}; expected one of {engine.METHODS}")
        if self.rounds < 1 or self.drift_rounds < 1:
            raise ConfigError("rounds and drift_rounds must be >= 1")
        if self.L != tda.BETTI_RESOLUTION:
            raise ConfigError(f"only L={tda.BETTI_RESOLUTION} gives the 48-entry descriptor")
        if self.n_sub < 2:
            raise ConfigError("n_sub must be >= 2")
        if not self.seeds:
            raise ConfigError("seeds must not be empty")
        if any(not 0 <= r <= 0.5 for r in self.attack_rates):
            raise ConfigError("attack rates must lie in [0, 0.5]")
        if self.alpha_c < 0:
            raise ConfigError("alpha_c must be >= 0")
        # build once so bad values fail at load time
        self.train_config()
        self.engine_config(0)
        self.scenario_config(self.seeds[0])

    @classmethod
    def from_dict(cls, data):
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def train_config(self):
        return TrainConfig(**{k: getattr(self, k) for k in _TRAIN_KEYS})

    def engine_config(self, seed, **overrides):
        cfg = engine.EngineConfig(
            M=self.M, beta_blend=self.beta_blend, tau=self.tau, n_sub=self.n_sub, L=self.L,
            lambda_softmax=self.lambda_softmax, weighting_mode=self.weighting_mode,
            use_trust=self.use_trust, use_exp=self.use_exp, augment=self.augment,
            drift_threshold=self.drift_threshold, drift_lr_multiplier=self.drift_lr_multiplier,
            train=self.train_config(), master_seed=seed)
        return replace(cfg, **overrides)

    def scenario_config(self, seed, adversarial_ids=None):
        over = {"seed": seed}
        ids = adversarial_ids if adversarial_ids is not None else self.adversarial_ids
        if ids is not None:
            over["adversarial_ids"] = tuple(ids)
        if self.flip_rate is not None:
            over["flip_rate"] = self.flip_rate
        return scenarios.preset(self.scenario, **over)


def load_config(path=None, **overrides):
    """Read a flat JSON config (optional) and apply non-None overrides."""
    data = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        except OSError as exc:
            raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
    data.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.from_dict(data)


# --------------------------------------------------------------------------
# running
# --------------------------------------------------------------------------

def _new_state(method, clients, ecfg, scenario, seed):
    if method == "ptopofl":
        return engine.PTopoFLState.create(clients, ecfg, scenario=scenario, seed=seed)
    return engine.BaselineState.create(method, clients, ecfg, scenario=scenario, seed=seed)


def _step(state):
    if isinstance(state, engine.PTopoFLState):
        return engine.run_round(state)
    return engine.baseline_round(state)


def run_method(cfg, method, seed, clients=None, rounds=None, **engine_overrides):
    """All round records of one (method, seed) run."""
    if clients is None:
        clients = scenarios.generate_scenario(cfg.scenario_config(seed))
    state = _new_state(method, clients, cfg.engine_config(seed, **engine_overrides),
                       cfg.scenario, seed)
    records = []
    for _ in range(rounds or cfg.rounds):
        state, rec = _step(state)
        records.append(rec)
    return records


def run_experiment(cfg, methods=None):
    """Round records for every method (default ``cfg.method``) and seed."""
    methods = [cfg.method] if methods is None else list(methods)
    records = []
    for seed in cfg.seeds:
        clients = scenarios.generate_scenario(cfg.scenario_config(seed))
        for method in methods:
            records.extend(run_method(cfg, method, seed, clients=clients))
    return records


def run_sweep(cfg):
    """Final-round behaviour across attack rates; adversaries are round(rate * K)."""
    rows, records = [], []
    for rate in cfg.attack_rates:
        for seed in cfg.seeds:
            K = cfg.scenario_config(seed).K
            ids = scenarios.adversaries_for_rate(K, rate, seed)
            clients = scenarios.generate_scenario(cfg.scenario_config(seed, adversarial_ids=ids))
            for method in cfg.sweep_methods:
                recs = run_method(cfg, method, seed, clients=clients, tau=cfg.sweep_tau)
                records.extend(recs)
                for rec in recs:
                    rows.append({"attack_rate": rate, "n_adversaries": len(ids),
                                 **record_row(rec)})
    return rows, records


def ablation_overrides(variant):
    """Engine settings for each ablation variant.

    ``no_clustering`` puts everyone in one cluster with uniform trust, no
    descriptor factor and no augmentation, which is exactly FedAvg.
    """
    if variant == "full":
        return {}
    if variant == "no_clustering":
        return {"M": 1, "use_trust": False, "use_exp": False, "augment": False}
    if variant == "no_blending":
        return {"beta_blend": 0.0}
    if variant == "no_trust":
        return {"use_trust": False}
    raise ConfigError(f"unknown ablation variant {variant!r}")


def run_ablation(cfg):
    rows, records = [], []
    for seed in cfg.seeds:
        clients = scenarios.generate_scenario(cfg.scenario_config(seed))
        for variant in ABLATION_VARIANTS:
            recs = run_method(cfg, "ptopofl", seed, clients=clients, **ablation_overrides(variant))
            records.extend(recs)
            rows.extend({"variant": variant, **record_row(r)} for r in recs)
    return rows, records


def run_drift_study(cfg, rounds=None):
    """Per-client entropies and drift when descriptors are recomputed each round."""
    rounds = rounds or cfg.drift_rounds
    rows = []
    for seed in cfg.seeds:
        clients = scenarios.generate_scenario(cfg.scenario_config(seed))
        state = _new_state("ptopofl", clients,
                           cfg.engine_config(seed, refresh_descriptors=True), cfg.scenario, seed)
        for _ in range(rounds):
            state, rec = engine.run_round(state)
            for i, c in enumerate(state.clients):
                f = tda.descriptor_fields(c.descriptor)
                rows.append({
                    "seed": seed, "round": rec.round, "client_id": c.client_id,
                    "adversarial": int(c.data.adversarial),
                    "h0_entropy": f["h0_entropy"], "h1_entropy": f["h1_entropy"],
                    "drift": rec.drift[i], "drift_flag": int(rec.drift[i] > cfg.drift_threshold),
                    "cluster": rec.clusters[i],
                })
    return rows


def run_privacy_report(cfg):
    """Per-client risk rows for the first seed, then summary and reference rows.

    The gradient side uses the plain logistic model (d + 1 parameters) that a
    gradient-sharing client would send.
    """
    seed = cfg.seeds[0]
    clients = scenarios.generate_scenario(cfg.scenario_config(seed))
    profiles = [privacy.PrivacyProfile(len(c.train), c.train.dim, c.train.dim + 1,
                                       alpha_c=cfg.alpha_c) for c in clients]
    rows = [privacy.profile_row(c.client_id, p) for c, p in zip(clients, profiles)]
    mean = {k: float(np.mean([r[k] for r in rows])) for k in PRIVACY_FIELDS[1:]}
    rows.append({"client_id": "mean", **mean})
    rows.append({"client_id": "topo_over_grad", "n": "", "d": "", "p": "",
                 "rho_grad": "", "rho_topo": mean["rho_topo"] / mean["rho_grad"],
                 "mi_grad": "", "mi_topo": mean["mi_topo"] / mean["mi_grad"]})
    for name, prof in privacy.reference_profiles(cfg.alpha_c).items():
        rows.append(privacy.profile_row(name, prof))
    return rows


# --------------------------------------------------------------------------
# summaries
# --------------------------------------------------------------------------

def convergence_round(aucs, fraction=CONVERGENCE_FRACTION):
    """First round (1-based) whose AUC reaches ``fraction`` of the final AUC."""
    values = list(aucs)
    if not values or values[-1] is None:
        return None
    target = fraction * values[-1]
    for r, a in enumerate(values, start=1):
        if a is not None and a >= target:
            return r
    return None


def _final_by_run(records):
    runs = {}
    for rec in records:
        runs.setdefault((rec.method, rec.seed), []).append(rec)
    return runs


def summary_rows(records):
    rows = []
    for (method, seed), recs in _final_by_run(records).items():
        aucs = [r.auc_global for r in sorted(recs, key=lambda r: r.round)]
        finite = [a for a in aucs if a is not None]
        rows.append({"method": method, "seed": seed, "final_auc": aucs[-1],
                     "best_auc": max(finite) if finite else None,
                     "convergence_round": convergence_round(aucs)})
    return rows


def _mean_std(values):
    values = [v for v in values if v is not None]
    if not values:
        return None, None
    return float(np.mean(values)), float(np.std(values))


def sweep_summary_rows(rows):
    final = {}
    for row in rows:
        key = (row["attack_rate"], row["method"], row["seed"])
        if key not in final or row["round"] > final[key]["round"]:
            final[key] = row
    out = []
    groups = {}
    for (rate, method, _), row in final.items():
        groups.setdefault((rate, method), []).append(row["auc_global"])
    for (rate, method), aucs in groups.items():
        mean, std = _mean_std(aucs)
        out.append({"attack_rate": rate, "method": method, "n_seeds": len(aucs),
                    "mean_final_auc": mean, "std_final_auc": std})
    return out


def ablation_summary_rows(rows):
    final = {}
    for row in rows:
        key = (row["variant"], row["seed"])
        if key not in final or row["round"] > final[key]["round"]:
            final[key] = row
    groups = {}
    for (variant, _), row in final.items():
        groups.setdefault(variant, []).append(row["auc_global"])
    out = []
    for variant in ABLATION_VARIANTS:
        if variant in groups:
            mean, std = _mean_std(groups[variant])
            out.append({"variant": variant, "n_seeds": len(groups[variant]),
                        "mean_final_auc": mean, "std_final_auc": std})
    return out


def timings(records):
    """Total wall-clock milliseconds per method and seed."""
    out = {}
    for rec in records:
        key = f"{rec.method}/seed={rec.seed}"
        out[key] = out.get(key, 0) + rec.wallclock_ms
    return out


# --------------------------------------------------------------------------
# CSV
# --------------------------------------------------------------------------

def format_value(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return "" if math.isnan(v) else repr(v)
    if isinstance(v, (list, tuple, np.ndarray)):
        return ";".join(format_value(x) for x in v)
    return str(v)


def record_row(rec):
    d = asdict(rec)
    return {k: d[k] for k in ROUND_FIELDS}


def to_csv_text(fieldnames, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(fieldnames)
    for row in rows:
        writer.writerow([format_value(row.get(k)) for k in fieldnames])
    return buf.getvalue()


def write_text_atomic(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def write_csv(path, fieldnames, rows):
    return write_text_atomic(path, to_csv_text(fieldnames, rows))


def read_csv(path):
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))
