"""Estimator mathematics: pseudo-outcome targets, training, and debiasing.

Conventions used throughout: arrays are stacked (n, tau); time is 0-based in
code and 1-based in the notation of the docstrings. A ``PseudoOutcomeTable``
stores one column per time 1..tau+1; column t-1 holds the value used as the
regression target for Q_{t-1}, and the final column always equals the scaled
terminal outcome.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, backward
from .errors import ConfigError, ContractError, EstimatorError, TrainingError
from .model import (ModelConfig, NuisanceEval, NuisanceModel,
                    evaluate_nuisances, polyak_update)
from .optim import Optimizer

_LOGIT_EPS = 1e-7  # Q values clamped to [eps, 1-eps] before any logit


# ---------------------------------------------------------------------------
# plans -> per-unit actions


def policy_actions(plan, L: np.ndarray, A: np.ndarray) -> np.ndarray:
    """Per-unit, per-step plan actions evaluated on the factual history."""
    n, tau = A.shape
    if plan.fixed_sequence is not None:
        if len(plan.fixed_sequence) != tau:
            raise ContractError(
                f"plan horizon {len(plan.fixed_sequence)} != data horizon {tau}")
        return np.broadcast_to(plan.fixed_sequence, (n, tau)).copy()
    out = np.zeros((n, tau), dtype=np.int64)
    for t in range(1, tau + 1):
        out[:, t - 1] = plan.policy_rule.actions_at(t, L[:, :t], A[:, :t - 1])
    return out


# ---------------------------------------------------------------------------
# inverse-propensity weights


@dataclass
class WeightTable:
    """Per-step weights w_k and their running products from time 1."""

    w: np.ndarray            # (n, tau); zero wherever A_k != a_k
    cumulative: np.ndarray   # (n, tau); column t-1 is prod_{k<=t} w_k
    g_min: float
    truncation_rate: float   # share of propensities clipped into [g_min, 1-g_min]


def compute_weights(g: np.ndarray, actions: np.ndarray, plan_actions: np.ndarray,
                    g_min: float = 0.01) -> WeightTable:
    """w_k = 1(A_k = a_k) / (a_k G_k + (1-a_k)(1-G_k)), G truncated first."""
    if not 0.0 < g_min < 0.5:
        raise ConfigError(f"g_min must lie in (0, 0.5), got {g_min}")
    truncated = (g < g_min) | (g > 1.0 - g_min)
    g_t = np.clip(g, g_min, 1.0 - g_min)
    denom = np.where(plan_actions == 1, g_t, 1.0 - g_t)
    w = (actions == plan_actions) / denom
    return WeightTable(w=w, cumulative=np.cumprod(w, axis=1), g_min=g_min,
                       truncation_rate=float(np.mean(truncated)) if g.size else 0.0)


# ---------------------------------------------------------------------------
# pseudo-outcome targets


@dataclass
class PseudoOutcomeTable:
    values: np.ndarray   # (n, tau+1)
    kind: str            # "ice" | "sdr"
    clipped: np.ndarray  # bool (n, tau+1)

    def regression_targets(self) -> np.ndarray:
        """(n, tau): column t-1 is the target used to regress Q_t."""
        return self.values[:, 1:]


def ice_targets(evals: NuisanceEval, outcomes: np.ndarray) -> PseudoOutcomeTable:
    """Plug-in targets: the realized next-step counterfactual evaluation."""
    n, tau = evals.q_cf.shape
    values = np.empty((n, tau + 1))
    values[:, :tau] = evals.q_cf
    values[:, tau] = outcomes
    return PseudoOutcomeTable(values=values, kind="ice",
                              clipped=np.zeros((n, tau + 1), dtype=bool))


def sdr_targets(evals: NuisanceEval, weights: WeightTable, outcomes: np.ndarray,
                clip: bool = True) -> PseudoOutcomeTable:
    """Sequentially doubly robust targets.

    Q+_t = Q_t(a_t,h_t) + sum_{s=t..tau} (prod_{k=t..s} w_k)
           [Q_{s+1}(a_{s+1},H_{s+1}) - Q_s(A_s,H_s)]  with  Q_{tau+1} = Y,
    evaluated by the backward recursion
    Q+_t = Q_t(a_t,h_t) + w_t (Q+_{t+1} - Q_t(A_t,H_t)).
    Clipping to [0,1] applies to the emitted entries only; the recursion
    itself propagates unclipped values.
    """
    n, tau = evals.q_cf.shape
    raw = np.empty((n, tau + 1))
    raw[:, tau] = outcomes
    nxt = raw[:, tau]
    for c in range(tau - 1, -1, -1):
        nxt = evals.q_cf[:, c] + weights.w[:, c] * (nxt - evals.q_obs[:, c])
        raw[:, c] = nxt
    clipped = np.zeros((n, tau + 1), dtype=bool)
    values = raw
    if clip:
        clipped = (raw < 0.0) | (raw > 1.0)
        values = np.clip(raw, 0.0, 1.0)
    return PseudoOutcomeTable(values=values, kind="sdr", clipped=clipped)


def influence_function(evals: NuisanceEval, weights: WeightTable,
                       outcomes: np.ndarray) -> np.ndarray:
    """Per-unit influence-function value for the full-horizon estimand.

    D* = sum_{s=1..tau} (prod_{k=1..s} w_k)
         [Q_{s+1}(a_{s+1},H_{s+1}) - Q_s(A_s,H_s)]  with  Q_{tau+1} = Y.
    """
    n, tau = evals.q_cf.shape
    nxt = np.empty((n, tau))
    nxt[:, :tau - 1] = evals.q_cf[:, 1:]
    nxt[:, tau - 1] = outcomes
    return np.sum(weights.cumulative * (nxt - evals.q_obs), axis=1)


# ---------------------------------------------------------------------------
# training losses


def _bce_from_logits(z, labels):
    """Numerically stable softplus(z) - labels*z, elementwise."""
    absz = ad.relu(z) + ad.relu(-z)
    sp = ad.relu(z) + ad.log(ad.exp(-absz) + 1.0)
    return sp - z * labels


def training_losses(live: dict, reg_targets: np.ndarray, L: np.ndarray,
                    A: np.ndarray, alpha: float, use_simulator: bool = True):
    """L = L_Q + alpha (L_G + L_S); each term summed over time, averaged over units.

    ``reg_targets`` come from the target network and stay outside the
    gradient path. The simulator loss runs t = 1..tau-1 only (the next-step
    label does not exist at tau). Returns (total loss Tensor, components).
    """
    q = live["q"]
    diff = q - reg_targets
    loss_q = (diff * diff).mean(axis=0).sum()

    g_logit = live["g_logit"]
    M = g_logit.shape[2]
    tau = A.shape[1]
    terms = []
    for m in range(M):
        z = g_logit[:, :tau - m, m]
        labels = A[:, m:].astype(np.float64)
        terms.append(_bce_from_logits(z, labels).mean(axis=0).sum())
    loss_g = terms[0]
    for t in terms[1:]:
        loss_g = loss_g + t

    total = loss_q + alpha * loss_g
    loss_s_val = 0.0
    if use_simulator:
        s = live["s"]
        s_terms = []
        for m in range(1, M + 1):
            if tau - m < 1:
                break
            pred = s[:, :tau - m, m - 1, :]
            lab = L[:, m:, :]
            err = pred - lab
            s_terms.append((err * err).mean(axis=(0, 2)).sum())
        if s_terms:
            loss_s = s_terms[0]
            for t in s_terms[1:]:
                loss_s = loss_s + t
            total = total + alpha * loss_s
            loss_s_val = loss_s.item()

    comps = {"q": loss_q.item(), "g": loss_g.item(), "s": loss_s_val,
             "total": total.item()}
    for name, val in comps.items():
        if not np.isfinite(val):
            raise TrainingError(f"non-finite training loss (component {name!r})",
                                component=name)
    return total, comps


# ---------------------------------------------------------------------------
# the training loop


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 256
    lr: float = 5e-3
    optimizer: str = "adam"
    use_sdr: bool = True
    use_simulator: bool = True
    clip_targets: bool = True
    g_min: float = 0.01
    lambda_ltmle: float = 1e-3
    seed: int = 0
    zero_head_init: bool = False  # diagnostic: constant-0.5 heads at init

    def validate(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")


@dataclass
class TrainingTrace:
    loss_total: list = field(default_factory=list)
    loss_q: list = field(default_factory=list)
    loss_g: list = field(default_factory=list)
    loss_s: list = field(default_factory=list)
    xi: list = field(default_factory=list)  # per-epoch (tau,) RMS to target
    diverged: bool = False


def train(dataset, plan, model_config: ModelConfig, train_config: TrainConfig,
          split=("train", "val")):
    """Mini-batch training with target-network pseudo-outcomes.

    Per batch: live factual forward; target-network forward (factual and
    plan-substituted, no gradients); SDR or plug-in ICE target construction;
    gradient step; Polyak update of the target copy. Divergence aborts with
    the trace attached to the raised TrainingError.
    """
    train_config.validate()
    model_config.validate()
    L, A, Y = dataset.arrays(split)
    if L.shape[1] != model_config.horizon or L.shape[2] != model_config.cov_dim:
        raise ContractError("dataset shape does not match model config")
    pa = policy_actions(plan, L, A)
    n = L.shape[0]

    model, target = NuisanceModel.init(model_config, train_config.seed,
                                       zero_heads=train_config.zero_head_init)
    opt = Optimizer(model.parameters(), lr=train_config.lr,
                    method=train_config.optimizer)
    rng_shuffle = np.random.Generator(np.random.Philox(key=(train_config.seed, 1)))
    rng_dropout = np.random.Generator(np.random.Philox(key=(train_config.seed, 2)))
    trace = TrainingTrace()
    want = ("q", "g", "s") if train_config.use_simulator else ("q", "g")
    tau = model_config.horizon

    try:
        for _epoch in range(train_config.epochs):
            perm = rng_shuffle.permutation(n)
            sums = {"total": 0.0, "q": 0.0, "g": 0.0, "s": 0.0}
            xi_sq = np.zeros(tau)
            seen = 0
            for lo in range(0, n, train_config.batch_size):
                idx = perm[lo:lo + train_config.batch_size]
                Lb, Ab, Yb, pab = L[idx], A[idx], Y[idx], pa[idx]

                tgt_eval = evaluate_nuisances(target, Lb, Ab, plan_actions=pab)
                if train_config.use_sdr:
                    wt = compute_weights(tgt_eval.g, Ab, pab, train_config.g_min)
                    table = sdr_targets(tgt_eval, wt, Yb,
                                        clip=train_config.clip_targets)
                else:
                    table = ice_targets(tgt_eval, Yb)
                reg = table.regression_targets()

                with Tape() as tape:
                    live = model.forward_graph(Lb, Ab, training=True,
                                               rng=rng_dropout, want=want)
                    loss, comps = training_losses(live, reg, Lb, Ab,
                                                  model_config.alpha,
                                                  train_config.use_simulator)
                grads = backward(tape, loss)
                opt.step(grads)
                polyak_update(model, target, model_config.target_rate)

                b = len(idx)
                seen += b
                for key in sums:
                    sums[key] += comps[key] * b
                xi_sq += np.sum((live["q"].data - reg) ** 2, axis=0)

            trace.loss_total.append(sums["total"] / seen)
            trace.loss_q.append(sums["q"] / seen)
            trace.loss_g.append(sums["g"] / seen)
            trace.loss_s.append(sums["s"] / seen)
            trace.xi.append(np.sqrt(xi_sq / seen))
    except TrainingError as err:
        trace.diverged = True
        raise TrainingError(str(err), trace=trace, component=err.component,
                            parameter=err.parameter) from None

    return model, trace


# ---------------------------------------------------------------------------
# LTMLE fluctuation


def _expit(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ez = np.exp(x[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _logit(p):
    p = np.clip(p, _LOGIT_EPS, 1.0 - _LOGIT_EPS)
    return np.log(p / (1.0 - p))


def _solve_fluctuation(logit_q, w, target, lam, max_iter=200,
                       lo=-10.0, hi=10.0, tol=1e-12):
    """argmin_e mean(w * BCE(expit(logit_q + e), target)) + lam |e|.

    The smooth part has derivative mean(w (expit(logit_q+e) - target)),
    nondecreasing in e, so the solve is a guarded Newton / bisection on a
    monotone score. Zero total weight returns exactly 0 (the L1 tie-break);
    a minimizer pinned at the interval boundary is returned as such.
    """
    if not np.any(w > 0):
        return 0.0

    def score(e):
        return float(np.mean(w * (_expit(logit_q + e) - target)))

    s0 = score(0.0)
    if abs(s0) <= lam:
        return 0.0
    want = lam if s0 > 0 else -lam  # solve score(e) = want on the proper side

    def g(e):
        return score(e) - want

    a, b = lo, hi
    ga, gb = g(a), g(b)
    if ga >= 0.0:
        return a
    if gb <= 0.0:
        return b
    e = 0.0
    ge = g(e)
    for _ in range(max_iter):
        if abs(ge) <= tol or (b - a) < 1e-13:
            return e
        if ge > 0:
            b = e
        else:
            a = e
        p = _expit(logit_q + e)
        hess = float(np.mean(w * p * (1.0 - p)))
        step_ok = hess > 0.0
        if step_ok:
            e_new = e - ge / hess
            step_ok = a < e_new < b
        if not step_ok:
            e_new = 0.5 * (a + b)
        e = e_new
        ge = g(e)
    raise EstimatorError(
        f"fluctuation solver did not converge within {max_iter} iterations")


def ltmle_fluctuate(evals: NuisanceEval, weights: WeightTable,
                    outcomes: np.ndarray, lam: float = 1e-3):
    """Backward one-parameter logistic fluctuations epsilon_tau..epsilon_1.

    At each t the submodel logit Q_{t,e} = logit Q_t + e is fit by the
    cumulative-weighted cross-entropy against the already-fluctuated
    next-step counterfactual evaluation (the outcome itself at t = tau).
    Returns (epsilons, fluctuated per-unit Q_1(a_1, H_1)).
    """
    n, tau = evals.q_obs.shape
    eps = np.zeros(tau)
    target = np.asarray(outcomes, dtype=np.float64)
    logit_cf = _logit(evals.q_cf)
    logit_obs = _logit(evals.q_obs)
    for c in range(tau - 1, -1, -1):
        eps[c] = _solve_fluctuation(logit_obs[:, c], weights.cumulative[:, c],
                                    target, lam)
        target = _expit(logit_cf[:, c] + eps[c])
    return eps, target  # target is now Q_{1,eps_1}(a_1, H_1)


# ---------------------------------------------------------------------------
# final estimators


ESTIMATOR_KINDS = ("plugin_ice", "raw_sdr", "ltmle")


@dataclass
class EstimateReport:
    estimator: str
    plan_id: str
    psi_scaled: float
    psi_unscaled: float
    se_plugin: float
    clip_rate: float
    weight_max: float
    weight_p99: float
    epsilons: np.ndarray
    xi: np.ndarray
    per_unit_q1: np.ndarray
    config_hash: str = ""
    seed: int = 0

    def record(self) -> dict:
        return {
            "estimator": self.estimator, "plan_id": self.plan_id,
            "psi_scaled": self.psi_scaled, "psi_unscaled": self.psi_unscaled,
            "se_plugin": self.se_plugin, "clip_rate": self.clip_rate,
            "weight_max": self.weight_max, "weight_p99": self.weight_p99,
            "epsilons": [float(e) for e in self.epsilons],
            "xi": [float(x) for x in self.xi],
            "config_hash": self.config_hash, "seed": self.seed,
        }


def estimate_from_evals(evals: NuisanceEval, actions: np.ndarray,
                        plan_actions: np.ndarray, outcomes: np.ndarray,
                        kind: str, y_min: float, y_max: float,
                        lam: float = 1e-3, g_min: float = 0.01,
                        clip_raw_sdr: bool = False, plan_id: str = "",
                        config_hash: str = "", seed: int = 0) -> EstimateReport:
    """CAPO estimate from prepared nuisance evaluations."""
    if kind not in ESTIMATOR_KINDS:
        raise ConfigError(f"unknown estimator kind {kind!r}")
    n, tau = evals.q_obs.shape
    wt = compute_weights(evals.g, actions, plan_actions, g_min)

    eps = np.zeros(tau)
    if kind == "plugin_ice":
        q1 = evals.q_cf[:, 0].copy()
    elif kind == "raw_sdr":
        table = sdr_targets(evals, wt, outcomes, clip=clip_raw_sdr)
        q1 = table.values[:, 0].copy()
    else:
        eps, q1 = ltmle_fluctuate(evals, wt, outcomes, lam)

    psi_scaled = float(np.mean(q1))
    psi_unscaled = float(y_min + (y_max - y_min) * psi_scaled)
    d_star = influence_function(evals, wt, outcomes)
    se_plugin = float(np.sqrt(np.mean(d_star ** 2) / n))

    raw_table = sdr_targets(evals, wt, outcomes, clip=False)
    vals = raw_table.values[:, :tau]
    clip_rate = float(np.mean((vals < 0.0) | (vals > 1.0)))
    diag_table = raw_table if kind == "raw_sdr" else ice_targets(evals, outcomes)
    xi = np.sqrt(np.mean((evals.q_obs - diag_table.regression_targets()) ** 2, axis=0))

    return EstimateReport(
        estimator=kind, plan_id=plan_id, psi_scaled=psi_scaled,
        psi_unscaled=psi_unscaled, se_plugin=se_plugin, clip_rate=clip_rate,
        weight_max=float(np.max(wt.cumulative)) if n else 0.0,
        weight_p99=float(np.percentile(wt.cumulative, 99)) if n else 0.0,
        epsilons=eps, xi=xi, per_unit_q1=q1, config_hash=config_hash, seed=seed)


def estimate(dataset, model: NuisanceModel, plan, kind: str,
             lam: float = 1e-3, g_min: float = 0.01, split="test",
             clip_raw_sdr: bool = False, config_hash: str = "",
             seed: int = 0) -> EstimateReport:
    """Run the model over a dataset split and form the requested estimate."""
    L, A, Y = dataset.arrays(split)
    if L.shape[1] != model.config.horizon or L.shape[2] != model.config.cov_dim:
        raise ContractError("dataset does not match the trained model's (tau, d)")
    pa = policy_actions(plan, L, A)
    evals = evaluate_nuisances(model, L, A, plan_actions=pa)
    return estimate_from_evals(evals, A, pa, Y, kind, dataset.y_min, dataset.y_max,
                               lam=lam, g_min=g_min, clip_raw_sdr=clip_raw_sdr,
                               plan_id=plan.plan_id, config_hash=config_hash,
                               seed=seed)
