import numpy as np
import numpy.testing as npt
import pytest

from longdr.autodiff import Tape, Tensor, backward
from longdr.errors import ConfigError, ContractError
from longdr.model import (ModelConfig, NuisanceModel, counterfactual_q_naive,
                          evaluate_nuisances, load_checkpoint, polyak_update,
                          save_checkpoint)

CFG = ModelConfig(hidden=8, layers=2, heads=2, cov_dim=3, horizon=4)


@pytest.fixture()
def batch():
    rng = np.random.default_rng(0)
    L = rng.normal(size=(6, 4, 3))
    A = rng.integers(0, 2, size=(6, 4))
    return L, A


@pytest.fixture()
def model():
    m, _ = NuisanceModel.init(CFG, seed=3)
    return m


class TestInit:
    def test_same_seed_identical(self):
        a, _ = NuisanceModel.init(CFG, seed=5)
        b, _ = NuisanceModel.init(CFG, seed=5)
        for name in a.params:
            assert np.array_equal(a.params[name].data, b.params[name].data)

    def test_target_is_bit_exact_copy(self):
        live, target = NuisanceModel.init(CFG, seed=1)
        for name in live.params:
            assert np.array_equal(live.params[name].data, target.params[name].data)
            assert live.params[name] is not target.params[name]

    def test_divisibility_invariant(self):
        ModelConfig(hidden=8, heads=4).validate()  # 8 % 4 == 0 is fine
        with pytest.raises(ConfigError):
            ModelConfig(hidden=6, heads=4).validate()

    def test_dropout_range(self):
        with pytest.raises(ConfigError):
            ModelConfig(dropout=1.0).validate()

    def test_zeroed_heads_give_half(self, batch):
        L, A = batch
        m, _ = NuisanceModel.init(CFG, seed=2, zero_heads=True)
        ev = evaluate_nuisances(m, L, A, plan_actions=np.ones_like(A))
        assert np.all(ev.q_obs == 0.5)
        assert np.all(ev.q_cf == 0.5)
        assert np.all(ev.g == 0.5)


class TestMasking:
    """No future information may leak into G_t, Q_t, or S_t."""

    def test_perturbing_future_covariate_leaves_g_bitwise(self, model, batch):
        L, A = batch
        base = evaluate_nuisances(model, L, A, want_s=True)
        for t in range(CFG.horizon - 1):
            L2 = L.copy()
            L2[:, t + 1, :] += 10.0
            pert = evaluate_nuisances(model, L2, A, want_s=True)
            assert np.array_equal(base.g[:, :t + 1], pert.g[:, :t + 1])
            assert np.array_equal(base.q_obs[:, :t + 1], pert.q_obs[:, :t + 1])
            assert np.array_equal(base.s[:, :t + 1], pert.s[:, :t + 1])

    def test_perturbing_current_action_leaves_g_bitwise(self, model, batch):
        L, A = batch
        base = evaluate_nuisances(model, L, A)
        for t in range(CFG.horizon):
            A2 = A.copy()
            A2[:, t] = 1 - A2[:, t]
            pert = evaluate_nuisances(model, L, A2)
            assert np.array_equal(base.g[:, :t + 1], pert.g[:, :t + 1])
            # Q_t may move (it conditions on A_t)
            assert not np.allclose(base.q_obs[:, t], pert.q_obs[:, t])

    def test_gradient_probes_future_tokens_zero(self, model, batch):
        """d G_t / d(future token) and d Q_t / d(post-A_t token) vanish."""
        L, A = batch
        Lt = Tensor(L, requires_grad=True)
        At = Tensor(A[:, :, None].astype(float), requires_grad=True)
        for t in range(CFG.horizon):
            with Tape() as tape:
                out = model.forward_graph(Lt, At, want=("q", "g", "s"))
                loss_g = out["g_logit"][:, t, 0].sum()
            grads = backward(tape, loss_g)
            # G_t sees H_t = (L_{1:t}, A_{1:t-1}) only
            assert np.all(grads[Lt][:, t + 1:, :] == 0.0)
            assert np.all(grads[At][:, t:, :] == 0.0)

            with Tape() as tape:
                out = model.forward_graph(Lt, At, want=("q", "g", "s"))
                loss_q = out["q"][:, t].sum() + out["s"][:, t].sum()
            grads = backward(tape, loss_q)
            # Q_t and S_t see (H_t, A_t)
            assert np.all(grads[Lt][:, t + 1:, :] == 0.0)
            assert np.all(grads[At][:, t + 1:, :] == 0.0)
            assert np.any(grads[At][:, t, :] != 0.0)

    def test_head_ranges_strictly_inside_unit_interval(self, batch):
        L, A = batch
        m, _ = NuisanceModel.init(CFG, seed=9)
        ev = evaluate_nuisances(m, 100.0 * L, A, plan_actions=np.zeros_like(A))
        for arr in (ev.q_obs, ev.q_cf, ev.g):
            assert arr.min() > 0.0
            assert arr.max() < 1.0


class TestCounterfactualSweep:
    def test_fast_path_matches_naive_substitution(self, batch):
        L, A = batch
        rng = np.random.default_rng(33)
        for layers, heads in ((1, 2), (3, 4)):
            cfg = ModelConfig(hidden=8, layers=layers, heads=heads,
                              cov_dim=3, horizon=4)
            m, _ = NuisanceModel.init(cfg, seed=layers)
            pa = rng.integers(0, 2, size=A.shape)
            ev = evaluate_nuisances(m, L, A, plan_actions=pa)
            ref = counterfactual_q_naive(m, L, A, pa)
            npt.assert_allclose(ev.q_cf, ref, rtol=0, atol=1e-12)

    def test_factual_plan_reproduces_q_obs(self, model, batch):
        L, A = batch
        ev = evaluate_nuisances(model, L, A, plan_actions=A)
        npt.assert_allclose(ev.q_cf, ev.q_obs, rtol=0, atol=1e-12)

    def test_eval_deterministic(self, model, batch):
        L, A = batch
        pa = np.ones_like(A)
        a = evaluate_nuisances(model, L, A, plan_actions=pa)
        b = evaluate_nuisances(model, L, A, plan_actions=pa)
        assert np.array_equal(a.q_cf, b.q_cf)
        assert np.array_equal(a.q_obs, b.q_obs)


class TestPolyak:
    def test_beta_one_copies_bitwise(self):
        live, target = NuisanceModel.init(CFG, seed=4)
        for p in live.params.values():
            p.data += np.pi
        polyak_update(live, target, 1.0)
        for name in live.params:
            assert np.array_equal(target.params[name].data, live.params[name].data)

    def test_beta_zero_is_noop(self):
        live, target = NuisanceModel.init(CFG, seed=4)
        before = {k: v.data.copy() for k, v in target.params.items()}
        for p in live.params.values():
            p.data += 1.0
        polyak_update(live, target, 0.0)
        for name in before:
            assert np.array_equal(target.params[name].data, before[name])

    def test_appendix_rate_scalar(self):
        cfg = ModelConfig(hidden=2, layers=1, heads=1, cov_dim=1, horizon=2)
        live, target = NuisanceModel.init(cfg, seed=0)
        live.params["head_q_b"].data[:] = 1.0
        target.params["head_q_b"].data[:] = 0.0
        polyak_update(live, target, 0.02)
        assert target.params["head_q_b"].data[0] == 0.02

    def test_bitwise_deterministic(self):
        results = []
        for _ in range(2):
            live, target = NuisanceModel.init(CFG, seed=8)
            for p in live.params.values():
                p.data *= 1.5
            polyak_update(live, target, 0.37)
            results.append({k: v.data.copy() for k, v in target.params.items()})
        for name in results[0]:
            assert np.array_equal(results[0][name], results[1][name])

    def test_shape_mismatch_rejected(self):
        live, target = NuisanceModel.init(CFG, seed=4)
        other, _ = NuisanceModel.init(
            ModelConfig(hidden=16, layers=2, heads=2, cov_dim=3, horizon=4), seed=4)
        with pytest.raises(ContractError):
            polyak_update(live, other, 0.5)

    def test_frozen_live_is_fixed_point_to_ulp(self):
        # beta*x + (1-beta)*x is not a bitwise fixed point in float64, but it
        # must stay within a few ulp of the live parameters
        live, target = NuisanceModel.init(CFG, seed=4)
        for _ in range(25):
            polyak_update(live, target, 0.02)
        for name in live.params:
            npt.assert_allclose(target.params[name].data, live.params[name].data,
                                rtol=1e-13, atol=1e-15)

    def test_gap_nonincreasing_under_constant_live(self):
        live, target = NuisanceModel.init(CFG, seed=6)
        for p in live.params.values():
            p.data += 0.5
        gaps = []
        for _ in range(10):
            polyak_update(live, target, 0.1)
            gap = sum(np.linalg.norm(live.params[k].data - target.params[k].data)
                      for k in live.params)
            gaps.append(gap)
        assert all(g2 <= g1 + 1e-12 for g1, g2 in zip(gaps, gaps[1:]))


class TestContracts:
    def test_horizon_mismatch(self, model):
        rng = np.random.default_rng(1)
        L = rng.normal(size=(2, 5, 3))
        A = rng.integers(0, 2, size=(2, 5))
        with pytest.raises(ContractError):
            evaluate_nuisances(model, L, A)

    def test_dropout_needs_rng(self, batch):
        L, A = batch
        cfg = ModelConfig(hidden=8, layers=1, heads=2, cov_dim=3, horizon=4,
                          dropout=0.5)
        m, _ = NuisanceModel.init(cfg, seed=0)
        with pytest.raises(ContractError):
            m.forward_graph(L, A, training=True)

    def test_dropout_disabled_at_eval(self, batch):
        L, A = batch
        cfg = ModelConfig(hidden=8, layers=1, heads=2, cov_dim=3, horizon=4,
                          dropout=0.5)
        m, _ = NuisanceModel.init(cfg, seed=0)
        a = m.forward_graph(L, A, training=False)["q"].data
        b = m.forward_graph(L, A, training=False)["q"].data
        assert np.array_equal(a, b)


class TestCheckpoint:
    def test_round_trip_exact(self, model, tmp_path):
        path = tmp_path / "ckpt.json"
        save_checkpoint(model, path, extra={"note": "unit"})
        back = load_checkpoint(path)
        assert back.config == model.config
        for name in model.params:
            assert np.array_equal(back.params[name].data, model.params[name].data)

    def test_round_trip_preserves_predictions(self, model, batch, tmp_path):
        L, A = batch
        path = tmp_path / "ckpt.json"
        save_checkpoint(model, path)
        back = load_checkpoint(path)
        a = evaluate_nuisances(model, L, A)
        b = evaluate_nuisances(back, L, A)
        assert np.array_equal(a.q_obs, b.q_obs)
        assert np.array_equal(a.g, b.g)
