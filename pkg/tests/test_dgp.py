import logging

import numpy as np
import numpy.testing as npt
import pytest

from longdr.dgp import (DgpConfig, Dataset, PolicyRule, TreatmentPlan,
                        _simulate_core, default_split_tags, ground_truth_capo,
                        initial_intensity, lag_coefficients, latent_step,
                        read_dataset, scale_outcome, simulate, standard_plans,
                        unscale_outcome, write_dataset)
from longdr.errors import ConfigError, DatasetFormatError

# Golden CAPO values frozen from the Monte-Carlo oracle itself
# (limited variant, tau=10, defaults; n_mc=200000, oracle seed 777).
GOLDEN_TAU10_LIMITED = {
    "cf1": (-0.9705724732503069, 0.001115805561134095),
    "cf2": (-0.8411160519383334, 0.0015190340017591439),
}


@pytest.fixture(scope="module")
def small_dataset():
    return simulate(DgpConfig(variant="limited", tau=5, n=150, seed=12))


class TestConfig:
    def test_intensity_initialization(self):
        assert initial_intensity(15) == 4.5

    def test_coefficients_shifted(self):
        c = lag_coefficients(8, "shifted")
        assert c[0] == -0.5
        assert c[1] == pytest.approx(1.0 / 3.0)
        assert len(c) == 8

    def test_coefficients_paper_singular_drops_first_lag(self):
        c = lag_coefficients(8, "paper_singular")
        assert c[0] == 0.0
        assert c[1] == -1.0
        assert c[2] == 0.5

    @pytest.mark.parametrize("bad", [
        dict(tau=1), dict(n=0), dict(lag=0), dict(noise_std_ay=0.0),
        dict(variant="huge"), dict(coefficient_rule="verbatim"),
    ])
    def test_validation(self, bad):
        with pytest.raises(ConfigError):
            DgpConfig(**bad).validate()


class TestLatentDynamics:
    def test_reduction_to_pure_decay(self):
        z = np.array([[1.0, -2.0, 0.5, 3.0, -1.0]])
        out = latent_step(z, a=np.zeros(1), xbar=np.zeros(1),
                          eps=0.0, omega=(0.37, 0.42, 0.29))
        npt.assert_allclose(out, 0.37 * z, rtol=0, atol=1e-15)

    def test_treatment_term_engages(self):
        z = np.zeros((1, 5))
        out = latent_step(z, a=np.ones(1), xbar=np.zeros(1),
                          eps=0.0, omega=(0.37, 0.42, 0.29))
        npt.assert_allclose(out, 0.42 * 0.5 * np.ones((1, 5)), atol=1e-15)


class TestSimulate:
    def test_same_seed_bit_identical(self):
        cfg = DgpConfig(variant="expanded", tau=6, n=80, seed=7)
        a, b = simulate(cfg), simulate(cfg)
        assert np.array_equal(a.covariates, b.covariates)
        assert np.array_equal(a.actions, b.actions)
        assert np.array_equal(a.outcomes, b.outcomes)
        assert a.y_min == b.y_min and a.y_max == b.y_max

    def test_seed_changes_draws(self):
        cfg = DgpConfig(tau=5, n=50, seed=1)
        other = simulate(DgpConfig(tau=5, n=50, seed=2))
        assert not np.array_equal(simulate(cfg).covariates, other.covariates)

    def test_shapes_and_dims(self, small_dataset):
        ds = small_dataset
        assert ds.d == 11  # 10 base covariates + lagged intermediate outcome
        assert ds.covariates.shape == (150, 5, 11)
        ex = simulate(DgpConfig(variant="expanded", tau=4, n=30, seed=3))
        assert ex.d == 16

    def test_outcomes_scaled_into_unit_interval(self, small_dataset):
        assert small_dataset.outcomes.min() >= 0.0
        assert small_dataset.outcomes.max() <= 1.0

    def test_lagged_outcome_absorbed_into_next_covariate(self, small_dataset):
        ds = small_dataset
        # column d-1 of L_{t+1} carries the intermediate outcome observed
        # after A_t; at t=1 the slot is zero-padded
        assert np.all(ds.covariates[:, 0, -1] == 0.0)
        assert np.std(ds.covariates[:, 1, -1]) > 0

    def test_split_tags(self):
        tags = default_split_tags(1500)
        assert tags.count("train") == 800
        assert tags.count("val") == 200
        assert tags.count("test") == 500

    def test_positivity_share_matches_recomputation(self):
        cfg = DgpConfig(tau=6, n=200, seed=4)
        ds = simulate(cfg)
        sim = _simulate_core(cfg, cfg.n, cfg.seed)
        share = np.mean((sim["propensities"] > 0.01) & (sim["propensities"] < 0.99))
        assert ds.positivity_share == pytest.approx(share, abs=0)

    def test_positivity_violations_are_reported(self, caplog):
        with caplog.at_level(logging.WARNING, logger="longdr.dgp"):
            ds = simulate(DgpConfig(tau=6, n=200, seed=4))
        if ds.positivity_share < 0.99:
            assert any("positivity" in r.message for r in caplog.records)

    @pytest.mark.xfail(
        strict=True,
        reason="the printed structural equations give a heavily treated policy; "
               "the >=99% in-band share does not hold at default settings "
               "(measured ~70%); violations are reported instead")
    def test_positivity_band_claim_at_defaults(self):
        ds = simulate(DgpConfig(variant="limited", tau=10, n=1500, seed=0))
        assert ds.positivity_share >= 0.99


class TestPlans:
    def test_cf1_all_zeros_any_tau(self):
        for tau in (3, 5, 10, 15, 20, 7):
            plans = standard_plans(tau)
            assert not plans["cf1"].fixed_sequence.any()
            assert plans["cf2"].fixed_sequence.all()

    def test_tau10_cf3(self):
        cf3 = standard_plans(10)["cf3"].fixed_sequence
        npt.assert_array_equal(cf3, [1] * 5 + [0] * 5)

    def test_tau20_cf4(self):
        cf4 = standard_plans(20)["cf4"].fixed_sequence
        npt.assert_array_equal(cf4, [0] * 10 + [1] * 10)

    def test_tau15_cf4_default_fills_gap(self):
        cf4 = standard_plans(15)["cf4"].fixed_sequence
        npt.assert_array_equal(cf4, [0] * 5 + [1] * 10)

    def test_tau15_cf4_literal_reading(self):
        cf4 = standard_plans(15, cf4_literal=True)["cf4"].fixed_sequence
        npt.assert_array_equal(cf4, [0] * 10 + [1] * 5)

    def test_fallback_half_split(self):
        plans = standard_plans(7)
        npt.assert_array_equal(plans["cf3"].fixed_sequence, [1] * 4 + [0] * 3)
        npt.assert_array_equal(plans["cf4"].fixed_sequence, [0] * 4 + [1] * 3)

    def test_plan_requires_exactly_one_spec(self):
        with pytest.raises(ConfigError):
            TreatmentPlan(plan_id="bad")
        with pytest.raises(ConfigError):
            TreatmentPlan(plan_id="bad", fixed_sequence=np.zeros(3, dtype=int),
                          policy_rule=PolicyRule("constant", {"value": 1}))
        with pytest.raises(ConfigError):
            TreatmentPlan(plan_id="bad", fixed_sequence=np.array([0, 2, 1]))


class TestGroundTruth:
    def test_requires_minimum_mc(self):
        cfg = DgpConfig(tau=3, n=10, seed=0)
        with pytest.raises(ConfigError):
            ground_truth_capo(cfg, standard_plans(3)["cf1"], 999, seed=0)

    def test_golden_values_tau10_limited(self):
        cfg = DgpConfig(variant="limited", tau=10, n=1500, seed=0)
        plans = standard_plans(10)
        for pid, (golden, golden_se) in GOLDEN_TAU10_LIMITED.items():
            mean, se = ground_truth_capo(cfg, plans[pid], 20_000, seed=123)
            # independent seed; agreement within combined MC error
            tol = 4.0 * np.hypot(se, golden_se)
            assert abs(mean - golden) < tol

    def test_golden_reproduction_exact(self):
        cfg = DgpConfig(variant="limited", tau=10, n=1500, seed=0)
        plans = standard_plans(10)
        mean, se = ground_truth_capo(cfg, plans["cf1"], 200_000, seed=777)
        assert mean == GOLDEN_TAU10_LIMITED["cf1"][0]
        assert se == GOLDEN_TAU10_LIMITED["cf1"][1]

    def test_clt_se_shrinks(self):
        cfg = DgpConfig(tau=4, n=10, seed=0)
        plan = standard_plans(4)["cf2"]
        _, se1 = ground_truth_capo(cfg, plan, 4_000, seed=5)
        _, se2 = ground_truth_capo(cfg, plan, 8_000, seed=5)
        ratio = se2 / se1
        assert 0.8 * (1 / np.sqrt(2)) < ratio < 1.2 * (1 / np.sqrt(2))

    def test_intervention_equals_natural_course(self):
        cfg = DgpConfig(tau=5, n=400, seed=9)
        obs = _simulate_core(cfg, 400, seed=9)
        rep = _simulate_core(cfg, 400, seed=9, forced_actions=obs["A"])
        assert np.array_equal(obs["Y"], rep["Y"])
        assert np.array_equal(obs["A"], rep["A"])

    def test_structural_null_disabling_treatment_paths(self):
        cfg = DgpConfig(variant="limited", tau=6, n=10, seed=0,
                        outcome_treatment_override=0)
        plans = standard_plans(6)
        m1, se1 = ground_truth_capo(cfg, plans["cf1"], 5_000, seed=3)
        m2, se2 = ground_truth_capo(cfg, plans["cf2"], 5_000, seed=3)
        assert m1 == pytest.approx(m2, abs=1e-12)

    def test_policy_plan_on_simulated_history(self):
        cfg = DgpConfig(tau=4, n=10, seed=0)
        always = TreatmentPlan(plan_id="pi1",
                               policy_rule=PolicyRule("constant", {"value": 1}))
        fixed = standard_plans(4)["cf2"]
        m_pol, _ = ground_truth_capo(cfg, always, 2_000, seed=8)
        m_fix, _ = ground_truth_capo(cfg, fixed, 2_000, seed=8)
        assert m_pol == m_fix  # same forced actions, same noise streams


class TestScaling:
    def test_round_trip(self):
        y = np.array([-2.0, 0.3, 1.7])
        s = scale_outcome(y, -2.0, 1.7)
        back = unscale_outcome(s, -2.0, 1.7)
        npt.assert_allclose(back, y, rtol=0, atol=1e-12)

    def test_train_extremes_hit_bounds(self, small_dataset):
        ds = small_dataset
        fit = ds.indices(("train", "val"))
        assert ds.outcomes[fit].min() == 0.0
        assert ds.outcomes[fit].max() == 1.0


class TestDatasetIO:
    def test_round_trip_exact(self, small_dataset, tmp_path):
        path = tmp_path / "data.jsonl"
        write_dataset(small_dataset, path)
        back = read_dataset(path)
        assert np.array_equal(back.covariates, small_dataset.covariates)
        assert np.array_equal(back.actions, small_dataset.actions)
        assert np.array_equal(back.outcomes, small_dataset.outcomes)
        assert back.y_min == small_dataset.y_min
        assert back.y_max == small_dataset.y_max
        assert back.splits == small_dataset.splits
        assert back.variant == small_dataset.variant

    def test_bad_action_value_names_field_and_line(self, small_dataset, tmp_path):
        path = tmp_path / "data.jsonl"
        write_dataset(small_dataset, path)
        lines = path.read_text().splitlines()
        lines[3] = lines[3].replace('"A":[', '"A":[2,', 1).replace(",1]", "]", 1)
        # make sure we actually injected a 2 while keeping length tau
        import json
        rec = json.loads(lines[3])
        rec["A"] = [2] + list(rec["A"])[1:len(rec["L"])]
        lines[3] = json.dumps(rec)
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(DatasetFormatError, match=r"line 4.*'A'"):
            read_dataset(path)

    def test_empty_dataset_round_trip(self, tmp_path):
        empty = Dataset(np.zeros((0, 4, 3)), np.zeros((0, 4), dtype=int),
                        np.zeros(0), tau=4, d=3, y_min=-1.0, y_max=2.0,
                        seed=5, variant="limited", splits=[])
        path = tmp_path / "empty.jsonl"
        write_dataset(empty, path)
        back = read_dataset(path)
        assert back.n == 0
        assert back.tau == 4 and back.d == 3
        assert back.y_min == -1.0 and back.y_max == 2.0

    def test_missing_header(self, tmp_path):
        path = tmp_path / "nohdr.jsonl"
        path.write_text("")
        with pytest.raises(DatasetFormatError, match="line 1"):
            read_dataset(path)

    def test_wrong_covariate_shape(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"tau":2,"d":2,"y_min":0.0,"y_max":1.0,"seed":0,'
                        '"variant":"limited"}\n'
                        '{"id":0,"L":[[1.0,2.0]],"A":[1,0],"Y":0.5}\n')
        with pytest.raises(DatasetFormatError, match=r"line 2.*'L'"):
            read_dataset(path)
