"""Two-step toy process with closed-form propensities and outcome means.

Used by the statistical acceptance checks: binary outcome, logistic
treatment assignment at both steps, Gaussian intermediate covariate. The
step-2 outcome regression is available in closed form; the step-1 regression
is obtained by Monte-Carlo integration over the intermediate covariate
(the "MC-regressed" oracle nuisance).
"""

import numpy as np

from longdr.model import NuisanceEval

G1_COEF = (0.4, -0.2)            # logit G1 = 0.4 L1 - 0.2
L2_COEF = (0.6, 0.8, -0.4, 0.5)  # L2 = .6 L1 + .8 A1 - .4 + .5 Z
G2_COEF = (0.5, 0.3, -0.1)       # logit G2 = .5 L2 + .3 A1 - .1
Y_COEF = (0.7, 0.9, 0.6, 0.8, -0.5)  # logit EY = .7 L1 + .9 L2 + .6 A1 + .8 A2 - .5


def expit(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=float)))


def true_g1(l1):
    return expit(G1_COEF[0] * l1 + G1_COEF[1])


def true_g2(l2, a1):
    return expit(G2_COEF[0] * l2 + G2_COEF[1] * a1 + G2_COEF[2])


def true_q2(l1, l2, a1, a2):
    b = Y_COEF
    return expit(b[0] * l1 + b[1] * l2 + b[2] * a1 + b[3] * a2 + b[4])


def draw_l2(l1, a1, z):
    c = L2_COEF
    return c[0] * l1 + c[1] * a1 + c[2] + c[3] * z


def simulate_toy(n, rng):
    l1 = rng.normal(size=n)
    a1 = (rng.random(n) < true_g1(l1)).astype(np.int64)
    l2 = draw_l2(l1, a1, rng.normal(size=n))
    a2 = (rng.random(n) < true_g2(l2, a1)).astype(np.int64)
    y = (rng.random(n) < true_q2(l1, l2, a1, a2)).astype(np.float64)
    return {"L1": l1, "A1": a1, "L2": l2, "A2": a2, "Y": y}


def mc_q1(l1, a1_eval, a2_plan, rng, n_draws=500):
    """E[Q2(a2, H2) | L1, A1 = a1_eval] by Monte Carlo over L2."""
    z = rng.normal(size=(len(l1), n_draws))
    l2 = draw_l2(l1[:, None], np.asarray(a1_eval)[:, None], z)
    return true_q2(l1[:, None], l2, np.asarray(a1_eval)[:, None], a2_plan).mean(axis=1)


def oracle_evals(data, plan, rng, n_draws=500, constant_q=None):
    """Oracle nuisance evaluations for a fixed plan (a1, a2).

    ``constant_q`` replaces every outcome regression with that constant
    (deliberate misspecification for double-robustness checks); the
    propensities are always the true ones.
    """
    a1_plan, a2_plan = plan
    n = len(data["L1"])
    g = np.column_stack([true_g1(data["L1"]), true_g2(data["L2"], data["A1"])])
    if constant_q is not None:
        q = np.full((n, 2), float(constant_q))
        return NuisanceEval(q_obs=q, q_cf=q.copy(), g=g)
    q_obs = np.column_stack([
        mc_q1(data["L1"], data["A1"], a2_plan, rng, n_draws),
        true_q2(data["L1"], data["L2"], data["A1"], data["A2"]),
    ])
    q_cf = np.column_stack([
        mc_q1(data["L1"], np.full(n, a1_plan), a2_plan, rng, n_draws),
        true_q2(data["L1"], data["L2"], data["A1"], np.full(n, a2_plan)),
    ])
    return NuisanceEval(q_obs=q_obs, q_cf=q_cf, g=g)


def plan_matrix(plan, n):
    a1, a2 = plan
    return np.column_stack([np.full(n, a1, dtype=np.int64),
                            np.full(n, a2, dtype=np.int64)])


def toy_truth(plan, n_mc, rng):
    """Ground-truth E[Y(a)] by forced-treatment simulation."""
    a1, a2 = plan
    l1 = rng.normal(size=n_mc)
    l2 = draw_l2(l1, np.full(n_mc, float(a1)), rng.normal(size=n_mc))
    p = true_q2(l1, l2, np.full(n_mc, a1), np.full(n_mc, a2))
    y = (rng.random(n_mc) < p).astype(float)
    return float(y.mean()), float(y.std(ddof=1) / np.sqrt(n_mc))
