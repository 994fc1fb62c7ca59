"""Experiment orchestration: benchmarks, tuning, ablations, reports.

``run_experiment`` reproduces the benchmark protocol at desk scale: per seed,
simulate a fresh dataset, train one nuisance model per counterfactual plan on
the final-train units, estimate on the held-out test units with each
requested estimator, and score everything against a cached Monte-Carlo
ground truth. Aggregation follows the signed-error convention: RMSE squares
signed errors; absolute bias is reported as mean +/- std across seeds.
"""

from __future__ import annotations

import csv
import itertools
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from . import _json, __version__
from .dgp import (DgpConfig, Dataset, TreatmentPlan, config_digest, dgp_from_dict,
                  ground_truth_capo, simulate, standard_plans)
from .errors import ConfigError, TrainingError
from .estimators import (ESTIMATOR_KINDS, TrainConfig, estimate, train)
from .model import ModelConfig, NuisanceModel, evaluate_nuisances

TUNING_GRID = {
    "batch_size": (128, 256),
    "lr": (5e-4, 1e-3, 5e-3),
    "hidden": (8, 16, 32),
    "dropout": (0.0, 0.1),
    "layers": (1, 2, 3),
    "heads": (2, 4),
    "alpha": (0.5, 1.0),
}


@dataclass(frozen=True)
class ExperimentConfig:
    dgp: DgpConfig = field(default_factory=DgpConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    plan_ids: tuple = ("cf1", "cf2", "cf3", "cf4")
    estimators: tuple = ("plugin_ice", "raw_sdr", "ltmle")
    seeds: tuple = tuple(range(20))
    n_mc_oracle: int = 100_000
    oracle_seed: int = 777
    exclude_divergent: bool = False
    cf4_literal: bool = False
    workers: int = 1

    def validate(self):
        self.dgp.validate()
        self.train.validate()
        for e in self.estimators:
            if e not in ESTIMATOR_KINDS:
                raise ConfigError(f"unknown estimator {e!r}")
        if not self.seeds:
            raise ConfigError("at least one seed required")

    def resolved_model(self) -> ModelConfig:
        m = replace(self.model, cov_dim=self.dgp.cov_dim, horizon=self.dgp.tau)
        m.validate()
        return m

    def plans(self) -> dict:
        all_plans = standard_plans(self.dgp.tau, cf4_literal=self.cf4_literal)
        missing = [p for p in self.plan_ids if p not in all_plans]
        if missing:
            raise ConfigError(f"unknown plan ids {missing}")
        return {p: all_plans[p] for p in self.plan_ids}


def experiment_to_dict(cfg: ExperimentConfig) -> dict:
    d = asdict(cfg)
    d["dgp"]["omega"] = list(cfg.dgp.omega)
    for key in ("plan_ids", "estimators", "seeds"):
        d[key] = list(d[key])
    return d


def experiment_from_dict(d: dict) -> ExperimentConfig:
    d = dict(d)
    if "dgp" in d:
        d["dgp"] = dgp_from_dict(d["dgp"])
    if "model" in d:
        d["model"] = ModelConfig(**d["model"])
    if "train" in d:
        d["train"] = TrainConfig(**d["train"])
    for key in ("plan_ids", "estimators", "seeds"):
        if key in d:
            d[key] = tuple(d[key])
    return ExperimentConfig(**d)


def experiment_digest(cfg: ExperimentConfig) -> str:
    import hashlib
    return hashlib.sha256(_json.dumps(experiment_to_dict(cfg)).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# ground-truth oracle cache


class OracleCache:
    """Write-once cache of Monte-Carlo ground truths keyed by config digest."""

    def __init__(self, path: Optional[str] = None):
        self.path = path
        self._store = {}
        if path and os.path.exists(path):
            import json
            with open(path) as f:
                self._store = json.load(f)

    def get_or_compute(self, dgp: DgpConfig, plan: TreatmentPlan,
                       n_mc: int, seed: int):
        norm = replace(dgp, n=1, seed=0)
        key = config_digest(norm, plan, extra={"n_mc": n_mc, "oracle_seed": seed})
        if key not in self._store:
            mean, se = ground_truth_capo(dgp, plan, n_mc, seed)
            self._store[key] = [mean, se]
            if self.path:
                with open(self.path, "w") as f:
                    f.write(_json.dumps(self._store))
        mean, se = self._store[key]
        return float(mean), float(se)


# ---------------------------------------------------------------------------
# per-seed jobs


@dataclass
class RunRow:
    seed: int
    plan_id: str
    estimator: str
    variant: str
    psi_scaled: float
    psi_unscaled: float
    truth: float
    truth_se: float
    bias: float
    se_plugin: float
    clip_rate: float
    weight_max: float
    weight_p99: float
    diverged: bool

    def record(self) -> dict:
        return {
            "seed": self.seed, "plan_id": self.plan_id, "estimator": self.estimator,
            "variant": self.variant, "psi_scaled": self.psi_scaled,
            "psi_unscaled": self.psi_unscaled, "truth": self.truth,
            "truth_se": self.truth_se, "bias": self.bias,
            "se_plugin": self.se_plugin, "clip_rate": self.clip_rate,
            "weight_max": self.weight_max, "weight_p99": self.weight_p99,
            "diverged": self.diverged,
        }


def _run_seed(cfg: ExperimentConfig, seed: int, truths: dict,
              variant: str = "default") -> list:
    """Simulate, train per plan, estimate per estimator. Pure in its arguments."""
    dgp = replace(cfg.dgp, seed=cfg.dgp.seed + seed)
    dataset = simulate(dgp)
    model_cfg = cfg.resolved_model()
    train_cfg = replace(cfg.train, seed=seed)
    digest = experiment_digest(cfg)
    rows = []
    for plan_id, plan in cfg.plans().items():
        truth, truth_se = truths[plan_id]
        try:
            model, _trace = train(dataset, plan, model_cfg, train_cfg)
            diverged = False
        except TrainingError:
            model, diverged = None, True
        for kind in cfg.estimators:
            if diverged:
                rows.append(RunRow(seed, plan_id, kind, variant, float("nan"),
                                   float("nan"), truth, truth_se, float("nan"),
                                   float("nan"), float("nan"), float("nan"),
                                   float("nan"), True))
                continue
            rep = estimate(dataset, model, plan, kind,
                           lam=cfg.train.lambda_ltmle, g_min=cfg.train.g_min,
                           split="test", config_hash=digest, seed=seed)
            rows.append(RunRow(seed, plan_id, kind, variant, rep.psi_scaled,
                               rep.psi_unscaled, truth, truth_se,
                               rep.psi_unscaled - truth, rep.se_plugin,
                               rep.clip_rate, rep.weight_max, rep.weight_p99,
                               False))
    return rows


# ---------------------------------------------------------------------------
# aggregation


@dataclass
class MetricsCell:
    estimator: str
    plan_id: str
    variant: str
    abs_bias_mean: float
    abs_bias_std: float
    rmse: float
    truth: float
    truth_se: float
    n_seeds: int
    n_diverged: int
    errors: tuple = ()  # per-seed signed errors, kept for identity checks

    def record(self) -> dict:
        return {
            "estimator": self.estimator, "plan_id": self.plan_id,
            "variant": self.variant, "abs_bias_mean": self.abs_bias_mean,
            "abs_bias_std": self.abs_bias_std, "rmse": self.rmse,
            "truth": self.truth, "truth_se": self.truth_se,
            "n_seeds": self.n_seeds, "n_diverged": self.n_diverged,
        }


class MetricsTable:
    def __init__(self, cells):
        self.cells = list(cells)

    def cell(self, estimator, plan_id, variant="default") -> MetricsCell:
        for c in self.cells:
            if (c.estimator, c.plan_id, c.variant) == (estimator, plan_id, variant):
                return c
        raise KeyError((estimator, plan_id, variant))

    def records(self):
        return [c.record() for c in self.cells]


def aggregate(rows, exclude_divergent: bool = False) -> MetricsTable:
    keys = []
    for r in rows:
        k = (r.variant, r.estimator, r.plan_id)
        if k not in keys:
            keys.append(k)
    cells = []
    for variant, estimator, plan_id in keys:
        sel = [r for r in rows
               if (r.variant, r.estimator, r.plan_id) == (variant, estimator, plan_id)]
        n_div = sum(r.diverged for r in sel)
        used = [r for r in sel if not (exclude_divergent and r.diverged)]
        errs = np.array([r.bias for r in used], dtype=float)
        finite = errs[np.isfinite(errs)]
        if finite.size:
            abs_mean = float(np.mean(np.abs(finite)))
            abs_std = float(np.std(np.abs(finite), ddof=1)) if finite.size > 1 else 0.0
            rmse = float(np.sqrt(np.mean(finite ** 2)))
        else:
            abs_mean = abs_std = rmse = float("nan")
        cells.append(MetricsCell(estimator, plan_id, variant, abs_mean, abs_std,
                                 rmse, sel[0].truth, sel[0].truth_se,
                                 len(used), n_div, errors=tuple(finite.tolist())))
    return MetricsTable(cells)


# ---------------------------------------------------------------------------
# main entry points


def compute_truths(cfg: ExperimentConfig, cache: Optional[OracleCache] = None) -> dict:
    cache = cache or OracleCache()
    return {plan_id: cache.get_or_compute(cfg.dgp, plan, cfg.n_mc_oracle,
                                          cfg.oracle_seed)
            for plan_id, plan in cfg.plans().items()}


def run_experiment(cfg: ExperimentConfig, out_dir: Optional[str] = None,
                   cache: Optional[OracleCache] = None, variant: str = "default"):
    """Full benchmark sweep; returns (MetricsTable, rows)."""
    cfg.validate()
    truths = compute_truths(cfg, cache)
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            futures = [pool.submit(_run_seed, cfg, s, truths, variant)
                       for s in cfg.seeds]
            per_seed = [f.result() for f in futures]
    else:
        per_seed = [_run_seed(cfg, s, truths, variant) for s in cfg.seeds]
    rows = [r for chunk in per_seed for r in chunk]
    table = aggregate(rows, exclude_divergent=cfg.exclude_divergent)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        emit([r.record() for r in rows], "jsonl", os.path.join(out_dir, "runs.jsonl"))
        emit([r.record() for r in rows], "csv", os.path.join(out_dir, "runs.csv"))
        emit(table.records(), "csv", os.path.join(out_dir, "metrics.csv"))
        write_manifest(cfg, os.path.join(out_dir, "manifest.json"))
    return table, rows


def tune(cfg: ExperimentConfig, grid: Optional[dict] = None, n_samples: int = 10,
         seed: int = 0):
    """Random search over the hyperparameter grid, scored by factual loss.

    Trains each sampled configuration on the tune-train units and scores
    mse(Q(A_tau, H_tau), Y) + sum_t bce(G_t(H_t), A_t) on the validation
    units. Returns (best hyperparameter dict, all scored samples).
    """
    cfg.validate()
    grid = grid or TUNING_GRID
    rng = np.random.Generator(np.random.Philox(key=(seed, 909)))
    names = sorted(grid)
    seen, samples = set(), []
    total = int(np.prod([len(grid[k]) for k in names]))
    while len(samples) < min(n_samples, total):
        pick = tuple(grid[k][rng.integers(len(grid[k]))] for k in names)
        if pick in seen:
            continue
        seen.add(pick)
        samples.append(dict(zip(names, pick)))

    dataset = simulate(cfg.dgp)
    plan = cfg.plans()[cfg.plan_ids[0]]
    results = []
    for hp in samples:
        model_cfg = replace(cfg.resolved_model(),
                            hidden=int(hp.get("hidden", cfg.model.hidden)),
                            layers=int(hp.get("layers", cfg.model.layers)),
                            heads=int(hp.get("heads", cfg.model.heads)),
                            dropout=float(hp.get("dropout", cfg.model.dropout)),
                            alpha=float(hp.get("alpha", cfg.model.alpha)))
        train_cfg = replace(cfg.train, seed=seed,
                            batch_size=int(hp.get("batch_size", cfg.train.batch_size)),
                            lr=float(hp.get("lr", cfg.train.lr)))
        try:
            model, _ = train(dataset, plan, model_cfg, train_cfg, split="train")
            score = factual_loss(model, dataset, split="val")
        except TrainingError:
            score = float("inf")
        results.append({"params": hp, "score": score})
    best = min(results, key=lambda r: r["score"])
    return best["params"], results


def factual_loss(model: NuisanceModel, dataset: Dataset, split="val") -> float:
    """mse(Q(A_tau,H_tau), Y) + sum_t bce(G_t(H_t), A_t), means over units."""
    L, A, Y = dataset.arrays(split)
    ev = evaluate_nuisances(model, L, A)
    mse = float(np.mean((ev.q_obs[:, -1] - Y) ** 2))
    g = np.clip(ev.g, 1e-12, 1.0 - 1e-12)
    bce = -(A * np.log(g) + (1 - A) * np.log(1.0 - g))
    return mse + float(np.sum(np.mean(bce, axis=0)))


def ablate(cfg: ExperimentConfig, out_dir: Optional[str] = None,
           cache: Optional[OracleCache] = None):
    """2x2 {SDR} x {simulator} training grid, each scored raw and re-debiased.

    The raw estimator matches the training mode (raw_sdr when SDR targets
    were used, plugin_ice otherwise); the re-debiased estimator is ltmle.
    Returns (MetricsTable over 8 variant rows x plans, rows, deltas) where
    deltas[(variant, plan)] = abs-bias change from applying LTMLE.
    """
    cfg.validate()
    cache = cache or OracleCache()
    all_rows = []
    for use_sdr, use_sim in itertools.product((True, False), repeat=2):
        variant = f"sdr={int(use_sdr)},sim={int(use_sim)}"
        raw_kind = "raw_sdr" if use_sdr else "plugin_ice"
        sub = replace(cfg,
                      train=replace(cfg.train, use_sdr=use_sdr, use_simulator=use_sim),
                      estimators=(raw_kind, "ltmle"))
        _, rows = run_experiment(sub, cache=cache, variant=variant)
        all_rows.extend(rows)
    table = aggregate(all_rows, exclude_divergent=cfg.exclude_divergent)
    deltas = {}
    for cell in table.cells:
        if cell.estimator != "ltmle":
            continue
        raw_kind = "raw_sdr" if cell.variant.startswith("sdr=1") else "plugin_ice"
        raw_cell = table.cell(raw_kind, cell.plan_id, cell.variant)
        deltas[(cell.variant, cell.plan_id)] = cell.abs_bias_mean - raw_cell.abs_bias_mean
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        emit([r.record() for r in all_rows], "jsonl",
             os.path.join(out_dir, "ablation_runs.jsonl"))
        emit(table.records(), "csv", os.path.join(out_dir, "ablation_metrics.csv"))
        write_manifest(cfg, os.path.join(out_dir, "manifest.json"))
    return table, all_rows, deltas


# ---------------------------------------------------------------------------
# emission


def _flatten(value):
    if isinstance(value, (list, tuple)):
        return ";".join(_flatten(v) for v in value)
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float):
        return _json.dumps(value)
    return str(value)


def emit(records, fmt: str, path: str):
    """Deterministic column order, full-precision reals, stable row order."""
    records = sorted(records, key=lambda r: tuple(str(r.get(k, "")) for k in
                                                  ("seed", "estimator", "plan_id",
                                                   "variant")))
    if fmt == "jsonl":
        with open(path, "w") as f:
            for rec in records:
                f.write(_json.dumps(rec) + "\n")
    elif fmt == "csv":
        columns = []
        for rec in records:
            for k in rec:
                if k not in columns:
                    columns.append(k)
        with open(path, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(columns)
            for rec in records:
                writer.writerow([_flatten(rec.get(c, "")) for c in columns])
    else:
        raise ConfigError(f"unknown emit format {fmt!r}")
    return path


def write_manifest(cfg: ExperimentConfig, path: str, extra: Optional[dict] = None):
    manifest = {
        "version": __version__,
        "config": experiment_to_dict(cfg),
        "config_hash": experiment_digest(cfg),
        "conventions": {
            "coefficient_rule": cfg.dgp.coefficient_rule,
            "policy_parenthesis": "tanh(y_lag)/2",
            "lag_boundary": "zero",
            "cf4_literal": cfg.cf4_literal,
            "rmse": "signed errors squared, aggregated across seeds",
            "divergence_policy": ("exclude" if cfg.exclude_divergent
                                  else "include-and-flag"),
        },
    }
    if extra:
        manifest["extra"] = extra
    with open(path, "w") as f:
        f.write(_json.dumps(manifest))
    return path
