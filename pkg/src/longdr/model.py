"""Masked multi-head sequence model producing Q, G and S evaluations.

The input sequence interleaves one token per variable group,
(L_1, A_1, ..., L_tau, A_tau); the terminal outcome is a label, never an
input token. Covariate vectors and scalar actions are lifted by affine maps,
tagged with learned type embeddings, and combined with fixed sinusoidal
positional encodings. Pre-normalization transformer blocks with a strict
causal attention mask follow, so the hidden state at the L_t token carries
exactly H_t and the state at the A_t token carries (H_t, A_t). Heads:

* Q-head (affine + sigmoid) on A-token states -> outcome regression in (0,1)
* G-head (affine + sigmoid) on L-token states -> treatment propensity
* S-head (affine, no activation) on A-token states -> next-step covariates

A lagged full parameter copy (the target model) provides stable regression
targets; it is refreshed by Polyak averaging.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _json
from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .errors import ConfigError, ContractError

_MASK_NEG = -1e30
_HEAD_EPS = 1e-12  # keeps sigmoid outputs strictly inside (0,1) at float64
_EVAL_CHUNK = 256


@dataclass(frozen=True)
class ModelConfig:
    """Architecture knobs; defaults follow the tau=15 random-search tuning."""

    hidden: int = 16
    layers: int = 1
    heads: int = 4
    dropout: float = 0.1
    cov_dim: int = 11
    horizon: int = 10
    alpha: float = 1.0
    target_rate: float = 0.02
    pred_steps: int = 1  # M: G/S heads predict the next M steps
    ffn_mult: int = 4

    def validate(self):
        if self.hidden % self.heads != 0:
            raise ConfigError(
                f"hidden size {self.hidden} not divisible by heads {self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if min(self.hidden, self.layers, self.heads, self.cov_dim,
               self.horizon, self.pred_steps, self.ffn_mult) < 1:
            raise ConfigError("model dimensions must be positive")
        if self.target_rate <= 0.0 or self.target_rate > 1.0:
            raise ConfigError("target_rate must lie in (0, 1]")


@dataclass
class NuisanceEval:
    """Per-unit, per-time nuisance evaluations under a treatment plan."""

    q_obs: np.ndarray           # (n, tau) Q_t(A_t, H_t)
    q_cf: np.ndarray            # (n, tau) Q_t(a_t, H_t)
    g: np.ndarray               # (n, tau) G_t(H_t)
    s: Optional[np.ndarray] = None  # (n, tau, d) S_t(A_t, H_t)


def positional_encoding(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None].astype(float)
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    pe = np.zeros((length, dim))
    pe[:, 0::2] = np.sin(angle[:, 0::2])
    pe[:, 1::2] = np.cos(angle[:, 1::2])
    return pe


def causal_mask(length: int) -> np.ndarray:
    """(S,S) additive mask; strictly-future positions get a large negative."""
    m = np.zeros((length, length))
    m[np.triu_indices(length, k=1)] = _MASK_NEG
    return m


class NuisanceModel:
    """Parameter container plus the forward pass."""

    def __init__(self, config: ModelConfig, params: dict):
        config.validate()
        self.config = config
        self.params = params
        seq = 2 * config.horizon
        self._pos = positional_encoding(seq, config.hidden)
        self._mask = causal_mask(seq)

    # -- construction -------------------------------------------------

    @classmethod
    def init(cls, config: ModelConfig, seed: int, zero_heads: bool = False):
        """Fan-in-scaled random init; returns (model, target copy).

        ``zero_heads`` zeroes the output heads so an untrained model emits
        exactly 0.5 from the sigmoid heads (diagnostic baselines).
        """
        config.validate()
        rng = np.random.Generator(np.random.Philox(key=seed))
        D, d, M = config.hidden, config.cov_dim, config.pred_steps
        F = config.ffn_mult * D
        params = {}

        def w(name, fan_in, shape):
            params[name] = Tensor(rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape),
                                  requires_grad=True, name=name)

        def zeros(name, shape):
            params[name] = Tensor(np.zeros(shape), requires_grad=True, name=name)

        def ones(name, shape):
            params[name] = Tensor(np.ones(shape), requires_grad=True, name=name)

        w("lift_l_w", d, (d, D))
        zeros("lift_l_b", (D,))
        w("lift_a_w", 1, (1, D))
        zeros("lift_a_b", (D,))
        w("type_emb", D, (3, D))
        for k in range(config.layers):
            p = f"blk{k}_"
            ones(p + "ln1_g", (D,))
            zeros(p + "ln1_b", (D,))
            for nm in ("wq", "wk", "wv", "wo"):
                w(p + nm, D, (D, D))
                zeros(p + nm.replace("w", "b"), (D,))
            ones(p + "ln2_g", (D,))
            zeros(p + "ln2_b", (D,))
            w(p + "ffn1_w", D, (D, F))
            zeros(p + "ffn1_b", (F,))
            w(p + "ffn2_w", F, (F, D))
            zeros(p + "ffn2_b", (D,))
        ones("final_ln_g", (D,))
        zeros("final_ln_b", (D,))
        if zero_heads:
            zeros("head_q_w", (D, 1))
            zeros("head_g_w", (D, M))
            zeros("head_s_w", (D, M * d))
        else:
            w("head_q_w", D, (D, 1))
            w("head_g_w", D, (D, M))
            w("head_s_w", D, (D, M * d))
        zeros("head_q_b", (1,))
        zeros("head_g_b", (M,))
        zeros("head_s_b", (M * d,))

        model = cls(config, params)
        return model, model.copy()

    def copy(self) -> "NuisanceModel":
        params = {k: Tensor(v.data.copy(), requires_grad=True, name=k)
                  for k, v in self.params.items()}
        return NuisanceModel(self.config, params)

    def parameters(self) -> dict:
        return self.params

    # -- forward ------------------------------------------------------

    def _layernorm(self, x, gain, bias):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = ad.power(var + 1e-6, -0.5)
        return xc * inv * gain + bias

    def encode(self, L: np.ndarray, A: np.ndarray, training: bool = False,
               rng: Optional[np.random.Generator] = None,
               cache: Optional[dict] = None) -> Tensor:
        """Token lift + transformer blocks; returns (B, 2*tau, hidden) states.

        When ``cache`` is a dict, per-layer key/value arrays are stored in it
        for the single-substitution counterfactual sweep.
        """
        cfg = self.config
        P = self.params
        # plain arrays normally; Tensors are accepted so tests can take
        # gradients with respect to the inputs themselves
        Lt = L if isinstance(L, Tensor) else Tensor(L)
        At = A if isinstance(A, Tensor) else Tensor(A[:, :, None].astype(np.float64))
        B, tau, d = Lt.data.shape
        if tau != cfg.horizon or d != cfg.cov_dim:
            raise ContractError(
                f"batch shape ({tau},{d}) does not match model ({cfg.horizon},{cfg.cov_dim})")
        drop = cfg.dropout if training else 0.0
        if drop > 0.0 and rng is None:
            raise ContractError("training-mode dropout requires an rng")

        lt = ad.matmul(Lt, P["lift_l_w"]) + P["lift_l_b"] + P["type_emb"][0]
        at = ad.matmul(At, P["lift_a_w"]) + P["lift_a_b"] + P["type_emb"][1]
        x = ad.concat([lt.reshape(B, tau, 1, cfg.hidden),
                       at.reshape(B, tau, 1, cfg.hidden)], axis=2)
        x = x.reshape(B, 2 * tau, cfg.hidden)
        x = x + self._pos

        S = 2 * tau
        nh = cfg.heads
        dk = cfg.hidden // nh
        scale = 1.0 / math.sqrt(dk)
        for k in range(cfg.layers):
            p = f"blk{k}_"
            h = self._layernorm(x, P[p + "ln1_g"], P[p + "ln1_b"])

            def split_heads(z):
                return z.reshape(B, S, nh, dk).swapaxes(1, 2)

            q = split_heads(ad.matmul(h, P[p + "wq"]) + P[p + "bq"])
            kk = split_heads(ad.matmul(h, P[p + "wk"]) + P[p + "bk"])
            v = split_heads(ad.matmul(h, P[p + "wv"]) + P[p + "bv"])
            if cache is not None:
                cache[f"k{k}"] = kk.data
                cache[f"v{k}"] = v.data
            scores = ad.matmul(q, kk.swapaxes(-1, -2)) * scale + self._mask
            attn = ad.softmax(scores, axis=-1)
            ctx = ad.matmul(attn, v).swapaxes(1, 2).reshape(B, S, cfg.hidden)
            ctx = ad.matmul(ctx, P[p + "wo"]) + P[p + "bo"]
            x = x + ad.dropout(ctx, drop, rng)

            h = self._layernorm(x, P[p + "ln2_g"], P[p + "ln2_b"])
            f = ad.relu(ad.matmul(h, P[p + "ffn1_w"]) + P[p + "ffn1_b"])
            f = ad.matmul(f, P[p + "ffn2_w"]) + P[p + "ffn2_b"]
            x = x + ad.dropout(f, drop, rng)

        return self._layernorm(x, P["final_ln_g"], P["final_ln_b"])

    def heads(self, enc: Tensor, want=("q", "g", "s")) -> dict:
        """Read head outputs from encoded states.

        q: (B,tau) sigmoid; g_logit: (B,tau,M) pre-sigmoid; s: (B,tau,M,d).
        """
        cfg = self.config
        P = self.params
        B = enc.shape[0]
        tau = cfg.horizon
        out = {}
        a_states = enc[:, 1::2, :]
        l_states = enc[:, 0::2, :]
        if "q" in want:
            q_logit = ad.matmul(a_states, P["head_q_w"]) + P["head_q_b"]
            out["q"] = ad.sigmoid(q_logit.reshape(B, tau))
        if "g" in want:
            out["g_logit"] = ad.matmul(l_states, P["head_g_w"]) + P["head_g_b"]
        if "s" in want:
            s = ad.matmul(a_states, P["head_s_w"]) + P["head_s_b"]
            out["s"] = s.reshape(B, tau, cfg.pred_steps, cfg.cov_dim)
        return out

    def forward_graph(self, L, A, training=False, rng=None, want=("q", "g", "s")):
        return self.heads(self.encode(L, A, training=training, rng=rng), want=want)

    # -- counterfactual sweep -------------------------------------------

    def _cf_sweep_mask(self, tau: int) -> np.ndarray:
        # row t masks every key index beyond the A_t token position 2t+1
        s = 2 * tau
        u = np.arange(s)[None, :]
        p = (2 * np.arange(tau) + 1)[:, None]
        m = np.where(u > p, _MASK_NEG, 0.0)
        return m

    def counterfactual_q(self, plan_actions: np.ndarray, cache: dict) -> np.ndarray:
        """Q_t(a_t, H_t) for every t from one factual key/value cache.

        A substituted sequence differs from the factual one only at the A_t
        token; under the causal mask every earlier position's hidden state is
        unchanged, so each substituted evaluation reduces to propagating a
        single query stream against the cached factual keys/values (the
        key/value at the substituted position itself is replaced). Equivalent
        to one full pass per action assignment, at a fraction of the cost.
        """
        cfg = self.config
        P = self.params
        B, tau = plan_actions.shape
        nh, dk = cfg.heads, cfg.hidden // cfg.heads
        scale = 1.0 / math.sqrt(dk)
        p_idx = 2 * np.arange(tau) + 1
        t_idx = np.arange(tau)
        mask = self._cf_sweep_mask(tau)

        a_val = plan_actions.astype(np.float64)[:, :, None]
        x = (a_val @ P["lift_a_w"].data + P["lift_a_b"].data
             + P["type_emb"].data[1] + self._pos[p_idx])

        def ln(z, g, b):
            mu = z.mean(axis=-1, keepdims=True)
            zc = z - mu
            var = (zc * zc).mean(axis=-1, keepdims=True)
            return zc / np.sqrt(var + 1e-6) * g.data + b.data

        def split(z):
            return z.reshape(B, tau, nh, dk).transpose(0, 2, 1, 3)

        for k in range(cfg.layers):
            p = f"blk{k}_"
            h = ln(x, P[p + "ln1_g"], P[p + "ln1_b"])
            q = split(h @ P[p + "wq"].data + P[p + "bq"].data)
            k_own = split(h @ P[p + "wk"].data + P[p + "bk"].data)
            v_own = split(h @ P[p + "wv"].data + P[p + "bv"].data)
            K, V = cache[f"k{k}"], cache[f"v{k}"]

            scores = np.matmul(q, K.swapaxes(-1, -2))          # (B, nh, tau, S)
            scores[:, :, t_idx, p_idx] = np.sum(q * k_own, axis=-1)
            scores = scores * scale + mask
            scores -= scores.max(axis=-1, keepdims=True)
            e = np.exp(scores)
            attn = e / e.sum(axis=-1, keepdims=True)

            ctx = np.matmul(attn, V)                           # (B, nh, tau, dk)
            own_w = attn[:, :, t_idx, p_idx][..., None]
            ctx = ctx + own_w * (v_own - V[:, :, p_idx, :])
            ctx = ctx.transpose(0, 2, 1, 3).reshape(B, tau, cfg.hidden)
            x = x + (ctx @ P[p + "wo"].data + P[p + "bo"].data)

            h = ln(x, P[p + "ln2_g"], P[p + "ln2_b"])
            f = np.maximum(h @ P[p + "ffn1_w"].data + P[p + "ffn1_b"].data, 0.0)
            x = x + (f @ P[p + "ffn2_w"].data + P[p + "ffn2_b"].data)

        x = ln(x, P["final_ln_g"], P["final_ln_b"])
        q_logit = (x @ P["head_q_w"].data + P["head_q_b"].data)[:, :, 0]
        return _sigmoid_np(q_logit)


TargetModel = NuisanceModel  # a target model is a lagged full parameter copy


# ---------------------------------------------------------------------------
# evaluation (numpy-facing)


def _squash(p: np.ndarray) -> np.ndarray:
    return np.clip(p, _HEAD_EPS, 1.0 - _HEAD_EPS)


def evaluate_nuisances(model: NuisanceModel, L: np.ndarray, A: np.ndarray,
                       plan_actions: Optional[np.ndarray] = None,
                       want_s: bool = False) -> NuisanceEval:
    """Factual pass plus one single-substitution pass per time step.

    ``plan_actions`` (n, tau) holds the plan's action per unit and step;
    q_cf substitutes only the action token at position t, keeping the rest
    of the sequence factual. Runs without gradient recording.
    """
    n, tau = A.shape
    if tau != model.config.horizon:
        raise ContractError(f"plan/batch horizon {tau} != model horizon "
                            f"{model.config.horizon}")
    q_obs = np.empty((n, tau))
    g = np.empty((n, tau))
    q_cf = np.empty((n, tau)) if plan_actions is not None else None
    s = np.empty((n, tau, model.config.cov_dim)) if want_s else None

    with no_grad():
        for lo in range(0, n, _EVAL_CHUNK):
            hi = min(lo + _EVAL_CHUNK, n)
            Lc, Ac = L[lo:hi], A[lo:hi]
            want = ("q", "g", "s") if want_s else ("q", "g")
            cache = {} if plan_actions is not None else None
            enc = model.encode(Lc, Ac, training=False, cache=cache)
            out = model.heads(enc, want=want)
            q_obs[lo:hi] = out["q"].data
            g[lo:hi] = _squash(_sigmoid_np(out["g_logit"].data[:, :, 0]))
            if want_s:
                s[lo:hi] = out["s"].data[:, :, 0, :]
            if plan_actions is not None:
                q_cf[lo:hi] = model.counterfactual_q(plan_actions[lo:hi], cache)

    return NuisanceEval(q_obs=_squash(q_obs),
                        q_cf=_squash(q_cf) if q_cf is not None else None,
                        g=g, s=s)


def counterfactual_q_naive(model: NuisanceModel, L: np.ndarray, A: np.ndarray,
                           plan_actions: np.ndarray) -> np.ndarray:
    """Reference implementation: one full forward per substituted step."""
    n, tau = A.shape
    q_cf = np.empty((n, tau))
    with no_grad():
        for t in range(tau):
            A_sub = A.copy()
            A_sub[:, t] = plan_actions[:, t]
            out = model.forward_graph(L, A_sub, training=False, want=("q",))
            q_cf[:, t] = out["q"].data[:, t]
    return q_cf


def _sigmoid_np(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ez = np.exp(x[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def forward(model: NuisanceModel, trajectories, plan, mode: str = "live"):
    """Spec-shaped entry point over a batch of Trajectory objects."""
    from .estimators import policy_actions  # late import; no cycle at module load
    if mode not in ("live", "target"):
        raise ContractError(f"unknown forward mode {mode!r}")
    L = np.stack([t.covariates for t in trajectories])
    A = np.stack([t.actions for t in trajectories])
    pa = policy_actions(plan, L, A) if plan is not None else None
    return evaluate_nuisances(model, L, A, plan_actions=pa, want_s=True)


# ---------------------------------------------------------------------------
# target network update


def polyak_update(live: NuisanceModel, target: NuisanceModel, beta: float):
    """theta' <- beta * theta + (1 - beta) * theta', elementwise and exact."""
    lp, tp = live.params, target.params
    if lp.keys() != tp.keys():
        raise ContractError("live/target parameter sets differ")
    for name, p in lp.items():
        if p.data.shape != tp[name].data.shape:
            raise ContractError(f"shape mismatch for parameter {name!r}")
        tp[name].data = beta * p.data + (1.0 - beta) * tp[name].data
    return target


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: NuisanceModel, path, extra: Optional[dict] = None):
    cfg = model.config
    payload = {
        "config": {
            "hidden": cfg.hidden, "layers": cfg.layers, "heads": cfg.heads,
            "dropout": cfg.dropout, "cov_dim": cfg.cov_dim, "horizon": cfg.horizon,
            "alpha": cfg.alpha, "target_rate": cfg.target_rate,
            "pred_steps": cfg.pred_steps, "ffn_mult": cfg.ffn_mult,
        },
        "norm_placement": "pre",
        "params": {k: {"shape": list(v.data.shape), "data": v.data.ravel()}
                   for k, v in model.params.items()},
    }
    if extra:
        payload["extra"] = extra
    with open(path, "w") as f:
        f.write(_json.dumps(payload))


def load_checkpoint(path) -> NuisanceModel:
    with open(path) as f:
        payload = json.load(f)
    config = ModelConfig(**payload["config"])
    params = {}
    for name, rec in payload["params"].items():
        arr = np.asarray(rec["data"], dtype=np.float64).reshape(rec["shape"])
        params[name] = Tensor(arr, requires_grad=True, name=name)
    return NuisanceModel(config, params)
