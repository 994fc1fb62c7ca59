"""Semi-synthetic longitudinal benchmark generators and ground-truth oracles.

Two variants of the data process are provided. Both simulate trajectories
(L_1, A_1, ..., L_tau, A_tau, Y) with binary treatments assigned by a
history-dependent stochastic policy and a terminal outcome driven by lagged
covariate/treatment interactions:

* ``limited``   -- ten autocorrelated base covariates that treatment cannot
  touch, so feedback runs only through the intermediate outcome and the
  treatment-intensity state.
* ``expanded``  -- five extra latent covariates that both react to treatment
  and feed back into assignment, strengthening treatment-confounder feedback.

The original benchmark drew the base covariate stream from real ICU
measurements which cannot ship here; a stationary AR(1) surrogate with unit
marginal variance replaces it (X_{t+1} = 0.8 X_t + N(0, 0.36), X_1 ~ N(0,1)).
All treatment/outcome structure is unchanged.

The printed per-lag coefficient (-1)^i/(1-i) divides by zero at i=1; two
repairs are exposed via ``coefficient_rule``: "shifted" uses (-1)^i/(1+i)
over i=1..h (default), "paper_singular" keeps (-1)^i/(1-i) but starts the
sum at i=2. Lagged terms with t-i < 1 are taken as zero. The ambiguous
policy term is read as tanh(Y_{t-i})/2. These choices are recorded in every
run manifest.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import ndtr

from . import _json
from .errors import ConfigError, ContractError, DatasetFormatError

log = logging.getLogger(__name__)

AR_RHO = 0.8
AR_NOISE_STD = 0.6  # variance 0.36 keeps the marginal variance at 1
N_BASE_COVS = 10
N_LATENT_COVS = 5
POSITIVITY_BAND = (0.01, 0.99)
_ORACLE_CHUNK = 25_000


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class DgpConfig:
    variant: str = "limited"
    tau: int = 10
    n: int = 1500
    lag: int = 8
    noise_std_ay: float = 0.5
    noise_std_z: float = 0.3
    omega: tuple = (0.37, 0.42, 0.29)
    coefficient_rule: str = "shifted"
    seed: int = 0
    # diagnostic knob: force the treatment value seen by the outcome formula
    outcome_treatment_override: Optional[int] = None

    def validate(self):
        if self.variant not in ("limited", "expanded"):
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.coefficient_rule not in ("shifted", "paper_singular"):
            raise ConfigError(f"unknown coefficient_rule {self.coefficient_rule!r}")
        if self.tau < 2:
            raise ConfigError("tau must be >= 2")
        if self.n < 1:
            raise ConfigError("n must be >= 1")
        if self.lag < 1:
            raise ConfigError("lag must be >= 1")
        if self.noise_std_ay <= 0 or self.noise_std_z <= 0:
            raise ConfigError("noise stds must be positive")
        if len(self.omega) != 3:
            raise ConfigError("omega must have three components")

    @property
    def base_dim(self) -> int:
        return N_BASE_COVS + (N_LATENT_COVS if self.variant == "expanded" else 0)

    @property
    def cov_dim(self) -> int:
        # base covariates plus the lagged intermediate outcome
        return self.base_dim + 1


def lag_coefficients(h: int, rule: str) -> np.ndarray:
    """Per-lag coefficients c_1..c_h; zeros mark dropped lags."""
    i = np.arange(1, h + 1, dtype=float)
    if rule == "shifted":
        return (-1.0) ** i / (1.0 + i)
    if rule == "paper_singular":
        c = np.zeros(h)
        if h >= 2:
            c[1:] = (-1.0) ** i[1:] / (1.0 - i[1:])
        return c
    raise ConfigError(f"unknown coefficient_rule {rule!r}")


def _rng(seed: int, stream: str, chunk: int = 0) -> np.random.Generator:
    digest = hashlib.sha256(f"{seed}/{stream}/{chunk}".encode()).digest()
    key = int.from_bytes(digest[:16], "little")
    return np.random.Generator(np.random.Philox(key=key))


# ---------------------------------------------------------------------------
# treatment plans


@dataclass(frozen=True)
class PolicyRule:
    """Named decision rule mapping an observed history prefix to an action."""

    name: str
    params: dict = field(default_factory=dict)

    def actions_at(self, t: int, l_hist: np.ndarray, a_hist: np.ndarray) -> np.ndarray:
        """Actions at 1-based time t given L_{1:t} (n,t,d) and A_{1:t-1} (n,t-1)."""
        if self.name == "constant":
            return np.full(l_hist.shape[0], int(self.params["value"]), dtype=np.int64)
        if self.name == "threshold":
            dim = int(self.params.get("dim", 0))
            thr = float(self.params.get("threshold", 0.0))
            return (l_hist[:, t - 1, dim] > thr).astype(np.int64)
        raise ConfigError(f"unknown policy rule {self.name!r}")


@dataclass(frozen=True)
class TreatmentPlan:
    """Counterfactual specification: a fixed sequence or a decision rule."""

    plan_id: str
    fixed_sequence: Optional[np.ndarray] = None
    policy_rule: Optional[PolicyRule] = None

    def __post_init__(self):
        if (self.fixed_sequence is None) == (self.policy_rule is None):
            raise ConfigError("exactly one of fixed_sequence/policy_rule must be set")
        if self.fixed_sequence is not None:
            seq = np.asarray(self.fixed_sequence, dtype=np.int64)
            if not np.isin(seq, (0, 1)).all():
                raise ConfigError("fixed_sequence must be binary")
            object.__setattr__(self, "fixed_sequence", seq)

    @property
    def kind(self) -> str:
        return "fixed" if self.fixed_sequence is not None else "policy"

    def horizon(self) -> Optional[int]:
        return None if self.fixed_sequence is None else len(self.fixed_sequence)


def _fixed(plan_id, bits):
    return TreatmentPlan(plan_id=plan_id, fixed_sequence=np.asarray(bits, dtype=np.int64))


def standard_plans(tau: int, cf4_literal: bool = False) -> dict:
    """The four benchmark counterfactual sequences CF1-CF4 for a horizon.

    Horizons outside the published presets fall back to CF1/CF2 plus a
    half-split CF3/CF4 at ceil(tau/2). ``cf4_literal`` selects the literal
    reading of the tau=15 CF4 listing (zeros through t=10) instead of the
    default gap-filling reading (ones from t=6).
    """
    ones = np.ones(tau, dtype=np.int64)
    zeros = np.zeros(tau, dtype=np.int64)

    def block(first_val, split):
        a = np.full(tau, 1 - first_val, dtype=np.int64)
        a[:split] = first_val
        return a

    if tau == 20:
        cf3, cf4 = block(1, 10), block(0, 10)
    elif tau == 15:
        cf3 = block(1, 10)
        cf4 = block(0, 10) if cf4_literal else block(0, 5)
    elif tau == 10:
        cf3, cf4 = block(1, 5), block(0, 5)
    elif tau == 5:
        cf3, cf4 = block(1, 3), block(0, 2)
    elif tau == 3:
        cf3, cf4 = block(1, 2), block(0, 1)
    else:
        k = (tau + 1) // 2
        cf3, cf4 = block(1, k), block(0, k)
    return {
        "cf1": _fixed("cf1", zeros),
        "cf2": _fixed("cf2", ones),
        "cf3": _fixed("cf3", cf3),
        "cf4": _fixed("cf4", cf4),
    }


# ---------------------------------------------------------------------------
# trajectories and datasets


@dataclass
class Trajectory:
    covariates: np.ndarray  # (tau, d); column d-1 is the lagged intermediate outcome
    actions: np.ndarray     # (tau,) in {0,1}
    outcome: float          # terminal, min-max scaled to [0,1]


class Dataset:
    """Stacked trajectories plus scaling metadata and per-unit split tags."""

    def __init__(self, covariates, actions, outcomes, tau, d, y_min, y_max,
                 seed, variant, splits, positivity_share=None):
        self.covariates = np.asarray(covariates, dtype=np.float64)
        self.actions = np.asarray(actions, dtype=np.int64)
        self.outcomes = np.asarray(outcomes, dtype=np.float64)
        self.tau = int(tau)
        self.d = int(d)
        self.y_min = float(y_min)
        self.y_max = float(y_max)
        self.seed = int(seed)
        self.variant = str(variant)
        self.splits = list(splits)
        self.positivity_share = positivity_share
        self._check()

    def _check(self):
        n = self.covariates.shape[0]
        if self.covariates.shape != (n, self.tau, self.d):
            raise ContractError(f"covariates shape {self.covariates.shape} "
                                f"!= ({n},{self.tau},{self.d})")
        if self.actions.shape != (n, self.tau):
            raise ContractError("actions shape mismatch")
        if self.outcomes.shape != (n,):
            raise ContractError("outcomes shape mismatch")
        if n and not np.isin(self.actions, (0, 1)).all():
            raise ContractError("actions must be binary")
        if not self.y_min < self.y_max:
            raise ContractError("outcome_min must be < outcome_max")
        if len(self.splits) != n:
            raise ContractError("one split tag per unit required")

    @property
    def n(self) -> int:
        return self.covariates.shape[0]

    @property
    def trajectories(self):
        return [Trajectory(self.covariates[i], self.actions[i], float(self.outcomes[i]))
                for i in range(self.n)]

    def indices(self, split=None) -> np.ndarray:
        if split is None:
            return np.arange(self.n)
        tags = np.asarray(self.splits)
        if isinstance(split, str):
            wanted = {split}
        else:
            wanted = set(split)
        return np.nonzero(np.isin(tags, sorted(wanted)))[0]

    def arrays(self, split=None):
        """(L, A, Y) arrays for the units in the given split(s)."""
        idx = self.indices(split)
        return self.covariates[idx], self.actions[idx], self.outcomes[idx]

    def subset(self, split) -> "Dataset":
        idx = self.indices(split)
        return Dataset(self.covariates[idx], self.actions[idx], self.outcomes[idx],
                       self.tau, self.d, self.y_min, self.y_max, self.seed,
                       self.variant, [self.splits[i] for i in idx],
                       positivity_share=self.positivity_share)

    def unscale(self, psi_scaled):
        return self.y_min + (self.y_max - self.y_min) * np.asarray(psi_scaled)


def default_split_tags(n: int) -> list:
    """Deterministic train/val/test tags: 800/200/500 at n=1500, proportional otherwise."""
    n_test = round(n / 3)
    n_val = round(0.2 * (n - n_test))
    n_train = n - n_test - n_val
    return ["train"] * n_train + ["val"] * n_val + ["test"] * n_test


def scale_outcome(y, y_min, y_max):
    return (np.asarray(y, dtype=np.float64) - y_min) / (y_max - y_min)


def unscale_outcome(s, y_min, y_max):
    return y_min + (y_max - y_min) * np.asarray(s, dtype=np.float64)


# ---------------------------------------------------------------------------
# the structural equations


def latent_step(z, a, xbar, eps, omega):
    """One transition of the treatment-responsive latent covariates."""
    z = np.asarray(z, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    sig = 1.0 / (1.0 + np.exp(-(z * z)))
    return (omega[0] * z
            + omega[1] * a[..., None] * sig
            + omega[2] * 0.25 * np.tanh(np.asarray(xbar))[..., None]
            + eps)


def initial_intensity(tau: int) -> float:
    return tau / 2.0 - 3.0


def _simulate_core(config: DgpConfig, n: int, seed: int,
                   plan: Optional[TreatmentPlan] = None,
                   forced_actions: Optional[np.ndarray] = None,
                   keep_covariates: bool = True):
    """Roll the structural equations forward for n units.

    ``plan``/``forced_actions`` override the observational policy (policy
    plans are evaluated on the evolving simulated history). Noise streams
    are drawn one step at a time from counter-based generators keyed by
    (seed, stream), so a call is a pure function of its arguments.

    Returns dict with A (n,tau), Y (n,) unscaled, propensities (n,tau) and,
    when kept, L (n,tau,cov_dim).
    """
    config.validate()
    tau, h = config.tau, config.lag
    p = config.base_dim
    expanded = config.variant == "expanded"
    coeffs = lag_coefficients(h, config.coefficient_rule)
    sd = config.noise_std_ay

    rx = _rng(seed, "x")
    ra = _rng(seed, "a")
    ry = _rng(seed, "y")
    rz = _rng(seed, "z") if expanded else None

    eps_a = ra.normal(0.0, sd, size=(n, tau))
    eps_y = ry.normal(0.0, sd, size=(n, tau))

    x = rx.normal(0.0, 1.0, size=(n, N_BASE_COVS))
    z = rz.normal(0.0, 1.0, size=(n, N_LATENT_COVS)) if expanded else None

    if plan is not None and plan.fixed_sequence is not None:
        if len(plan.fixed_sequence) != tau:
            raise ContractError(
                f"plan horizon {len(plan.fixed_sequence)} != tau {tau}")
        forced_actions = np.broadcast_to(plan.fixed_sequence, (n, tau))

    xbar = np.zeros((n, tau))
    xlo = np.zeros((n, tau))
    xhi = np.zeros((n, tau))
    y_seq = np.zeros((n, tau))
    actions = np.zeros((n, tau), dtype=np.int64)
    prop = np.zeros((n, tau))
    L = np.zeros((n, tau, p + 1)) if keep_covariates else None
    ell = np.full(n, initial_intensity(tau))

    for j in range(tau):  # j = t-1
        t = j + 1
        if j > 0:
            x = AR_RHO * x + rx.normal(0.0, AR_NOISE_STD, size=(n, N_BASE_COVS))
        state = np.concatenate([x, z], axis=1) if expanded else x
        xbar[:, j] = state.mean(axis=1)
        xlo[:, j] = state[:, :5].mean(axis=1)
        xhi[:, j] = state[:, 5:10].mean(axis=1)
        if keep_covariates:
            L[:, j, :p] = state
            L[:, j, p] = y_seq[:, j - 1] if j > 0 else 0.0

        pre = -np.tanh(ell - tau / 2.0)
        for i in range(1, h + 1):
            if j - i < 0:
                break
            pre = pre + coeffs[i - 1] * (xbar[:, j - i] + np.tanh(y_seq[:, j - i]) / 2.0)
        prop[:, j] = ndtr(pre / sd)

        if forced_actions is not None:
            a_t = np.asarray(forced_actions[:, j], dtype=np.int64)
        elif plan is not None:
            if L is None:
                raise ContractError("policy plans require covariate history")
            a_t = plan.policy_rule.actions_at(t, L[:, :t], actions[:, :j])
        else:
            a_t = (pre + eps_a[:, j] > 0.0).astype(np.int64)
        actions[:, j] = a_t

        acc = np.zeros(n)
        for i in range(1, h + 1):
            if j - i < 0:
                # lagged covariates and treatment taken as zero
                acc = acc + coeffs[i - 1] * np.tanh(1.0)
            else:
                if config.outcome_treatment_override is None:
                    a_lag = actions[:, j - i]
                else:
                    a_lag = np.full(n, config.outcome_treatment_override)
                acc = acc + coeffs[i - 1] * np.tanh(
                    np.sin(xlo[:, j - i] * a_lag) + np.cos(xhi[:, j - i] * a_lag))
        y_seq[:, j] = 5.0 * acc + eps_y[:, j]

        ell = ell + 2.0 * (actions[:, j] - 1.0) * xbar[:, j] * np.tanh(y_seq[:, j])

        if expanded and j + 1 < tau:
            z = latent_step(z, actions[:, j], xbar[:, j],
                            rz.normal(0.0, config.noise_std_z, size=(n, N_LATENT_COVS)),
                            config.omega)

    return {"L": L, "A": actions, "Y": y_seq[:, tau - 1], "propensities": prop}


def simulate(config: DgpConfig) -> Dataset:
    """Draw a full observational dataset; pure function of the config.

    Terminal outcomes are min-max scaled with extremes taken from the
    non-test units; test outcomes are clipped into [0,1]. The share of
    (unit, t) pairs whose true propensity lies inside (0.01, 0.99) is
    recorded as ``positivity_share`` and logged when below 99%.
    """
    config.validate()
    sim = _simulate_core(config, config.n, config.seed)
    splits = default_split_tags(config.n)
    fit_idx = [i for i, s in enumerate(splits) if s != "test"]
    y_raw = sim["Y"]
    y_fit = y_raw[fit_idx] if fit_idx else y_raw
    y_min, y_max = float(np.min(y_fit)), float(np.max(y_fit))
    if not y_min < y_max:
        raise ConfigError("degenerate outcome range on the training split")
    y_scaled = np.clip(scale_outcome(y_raw, y_min, y_max), 0.0, 1.0)

    lo, hi = POSITIVITY_BAND
    share = float(np.mean((sim["propensities"] > lo) & (sim["propensities"] < hi)))
    if share < 0.99:
        log.warning("positivity: only %.1f%% of (unit,t) propensities inside (%g, %g)",
                    100 * share, lo, hi)

    return Dataset(sim["L"], sim["A"], y_scaled, config.tau, config.cov_dim,
                   y_min, y_max, config.seed, config.variant, splits,
                   positivity_share=share)


def ground_truth_capo(config: DgpConfig, plan: TreatmentPlan, n_mc: int,
                      seed: int):
    """Monte-Carlo CAPO oracle: force the plan, average terminal outcomes.

    Returns (mean, standard error) on the unscaled outcome side. Simulation
    runs in fixed-size chunks with independently keyed noise streams so the
    result does not depend on scheduling.
    """
    if n_mc < 1000:
        raise ConfigError("n_mc must be >= 1000")
    keep = plan.policy_rule is not None
    total = 0.0
    total_sq = 0.0
    done = 0
    chunk_idx = 0
    while done < n_mc:
        m = min(_ORACLE_CHUNK, n_mc - done)
        sim = _simulate_core(config, m, seed=_chunk_seed(seed, chunk_idx),
                             plan=plan, keep_covariates=keep)
        total += float(np.sum(sim["Y"]))
        total_sq += float(np.sum(sim["Y"] ** 2))
        done += m
        chunk_idx += 1
    mean = total / n_mc
    var = max(total_sq / n_mc - mean * mean, 0.0) * n_mc / max(n_mc - 1, 1)
    se = float(np.sqrt(var / n_mc))
    return mean, se


def _chunk_seed(seed: int, chunk: int) -> int:
    digest = hashlib.sha256(f"oracle/{seed}/{chunk}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


# ---------------------------------------------------------------------------
# dataset file round-trip


def write_dataset(dataset: Dataset, path):
    """Line-delimited records, all reals at 17 significant digits."""
    with open(path, "w") as f:
        header = {"tau": dataset.tau, "d": dataset.d,
                  "y_min": dataset.y_min, "y_max": dataset.y_max,
                  "seed": dataset.seed, "variant": dataset.variant}
        f.write(_json.dumps(header) + "\n")
        for i in range(dataset.n):
            rec = {"id": i,
                   "L": dataset.covariates[i],
                   "A": dataset.actions[i],
                   "Y": float(dataset.outcomes[i]),
                   "split": dataset.splits[i]}
            f.write(_json.dumps(rec) + "\n")


def _field(rec, name, lineno):
    if name not in rec:
        raise DatasetFormatError(f"line {lineno}: missing field '{name}'")
    return rec[name]


def read_dataset(path) -> Dataset:
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines:
        raise DatasetFormatError("line 1: missing header record")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"line 1: invalid record ({e.msg})") from None

    tau = int(_field(header, "tau", 1))
    d = int(_field(header, "d", 1))
    covs, acts, outs, splits = [], [], [], []
    for k, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise DatasetFormatError(f"line {k}: invalid record ({e.msg})") from None
        L = np.asarray(_field(rec, "L", k), dtype=np.float64)
        if L.shape != (tau, d):
            raise DatasetFormatError(
                f"line {k}: field 'L': expected shape ({tau},{d}), got {L.shape}")
        A = np.asarray(_field(rec, "A", k))
        if A.shape != (tau,) or not np.isin(A, (0, 1)).all():
            raise DatasetFormatError(
                f"line {k}: field 'A': must be a binary vector of length {tau}")
        covs.append(L)
        acts.append(A.astype(np.int64))
        outs.append(float(_field(rec, "Y", k)))
        splits.append(rec.get("split"))

    n = len(covs)
    if any(s is None for s in splits):
        splits = default_split_tags(n)
    if n:
        covariates = np.stack(covs)
        actions = np.stack(acts)
    else:
        covariates = np.zeros((0, tau, d))
        actions = np.zeros((0, tau), dtype=np.int64)
    return Dataset(covariates, actions, np.asarray(outs, dtype=np.float64),
                   tau, d, float(_field(header, "y_min", 1)),
                   float(_field(header, "y_max", 1)),
                   int(_field(header, "seed", 1)), str(_field(header, "variant", 1)),
                   splits)


def config_digest(config: DgpConfig, plan: Optional[TreatmentPlan] = None,
                  extra: Optional[dict] = None) -> str:
    """Stable hash identifying a (config, plan) pair for oracle caching."""
    payload = {"dgp": _dgp_dict(config)}
    if plan is not None:
        payload["plan"] = plan_dict(plan)
    if extra:
        payload["extra"] = extra
    return hashlib.sha256(_json.dumps(payload).encode()).hexdigest()[:16]


def _dgp_dict(config: DgpConfig) -> dict:
    return {
        "variant": config.variant, "tau": config.tau, "n": config.n,
        "lag": config.lag, "noise_std_ay": config.noise_std_ay,
        "noise_std_z": config.noise_std_z, "omega": list(config.omega),
        "coefficient_rule": config.coefficient_rule, "seed": config.seed,
        "outcome_treatment_override": config.outcome_treatment_override,
    }


def dgp_from_dict(d: dict) -> DgpConfig:
    d = dict(d)
    if "omega" in d:
        d["omega"] = tuple(d["omega"])
    return DgpConfig(**d)


def plan_dict(plan: TreatmentPlan) -> dict:
    if plan.fixed_sequence is not None:
        return {"plan_id": plan.plan_id, "fixed_sequence": plan.fixed_sequence}
    return {"plan_id": plan.plan_id, "rule": plan.policy_rule.name,
            "params": plan.policy_rule.params}


def plan_from_dict(d: dict) -> TreatmentPlan:
    if "fixed_sequence" in d and d["fixed_sequence"] is not None:
        return TreatmentPlan(plan_id=d["plan_id"],
                             fixed_sequence=np.asarray(d["fixed_sequence"]))
    return TreatmentPlan(plan_id=d["plan_id"],
                         policy_rule=PolicyRule(d["rule"], dict(d.get("params", {}))))
