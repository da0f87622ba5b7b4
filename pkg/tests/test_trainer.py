import numpy as np
import pytest
from sklearn.metrics import mean_absolute_error, mean_squared_error

from pemorl import auction_env as env
from pemorl import trainer as tr
from pemorl.auction_env import STATE_DIM, BehaviorParams, SimConfig
from pemorl.baselines import GSPProxyModel
from pemorl.config import RunConfig
from pemorl.dataset import DataSet, Transition, collect_real_data
from pemorl.equivariance import check_equivariance

TINY = {
    "data": {"episodes": 10, "test_episodes": 4},
    "model": {"epochs": 3, "n_members": 2, "embed_dim": 8, "n_heads": 2, "hidden": 16},
    "learner": {"hidden": 16},
    "trainer": {"max_iterations": 3, "min_iterations": 1, "q_steps": 3, "policy_steps": 3, "n_starts": 32,
                "batch_size": 32, "eval_episodes": 3, "n_projections": 16},
}


@pytest.fixture(scope="module")
def cfg():
    return RunConfig().replace(**TINY)


@pytest.fixture(scope="module")
def real(cfg):
    return tr.make_real_data(cfg, 0)


@pytest.fixture(scope="module")
def ens(cfg, real):
    return tr.fit_ensemble(real, cfg.model, 0)


@pytest.fixture(scope="module")
def policy(cfg, real):
    return tr.learner_for(real, cfg, 1.0, 0).policy


# -- rollouts ------------------------------------------------------------------


def test_one_step_rollouts_give_one_transition_per_start(ens, policy, real):
    d, rb = tr.rollout_imaginary(ens, policy, real, 1, 0.5, 100, np.random.default_rng(0))
    assert len(d) == 100 and len(rb) == 100
    assert {t.kind for t in d.transitions} == {"imaginary_penalized"}


def test_unpenalized_rollouts_store_raw_samples(ens, policy, real):
    d, rb = tr.rollout_imaginary(ens, policy, real, 3, 0.0, 40, np.random.default_rng(1))
    np.testing.assert_array_equal([t.r for t in d.transitions], rb.reward)


def test_penalty_dominance_and_penalized_below_raw(ens, policy, real):
    d, rb = tr.rollout_imaginary(ens, policy, real, 2, 1e6, 50, np.random.default_rng(2))
    r = np.array([t.r for t in d.transitions])
    assert np.all(r[rb.sigma > 0] <= 0)
    d1, rb1 = tr.rollout_imaginary(ens, policy, real, 2, 0.7, 50, np.random.default_rng(2))
    r1 = np.array([t.r for t in d1.transitions])
    assert np.all(r1 <= rb1.reward)
    np.testing.assert_array_equal(r1 == rb1.reward, 0.7 * rb1.sigma == 0)


def test_rollouts_stop_at_the_horizon_and_stay_in_range(ens, policy, real):
    d, rb = tr.rollout_imaginary(ens, policy, real, 40, 0.0, 30, np.random.default_rng(3))
    assert max(t.t for t in d.transitions) <= 15
    assert len(d) <= 30 * 16
    s = np.stack([t.s_next for t in d.transitions]).reshape(-1, 3, STATE_DIM)
    assert s[..., env.TIME_LEFT].min() >= 0 and s[..., env.BUDGET_LEFT].max() <= 1
    with pytest.raises(ValueError):
        tr.rollout_imaginary(ens, policy, real, 0, 0.0, 5, np.random.default_rng(0))


def test_project_locals_clips_ranges():
    s = np.array([[1.5, -0.2, -3.0, 2.0, -1.0, 0.5]])
    np.testing.assert_array_equal(tr.project_locals(s), [[1.0, 0.0, 0.0, 2.0, 0.0, 0.5]])


@pytest.mark.parametrize("ratio, k_img", [(0.5, 128), (0.3, 77), (0.0, 0), (1.0, 256)])
def test_mixed_batch_ratio_is_exact(ratio, k_img):
    ri, ii = tr.mixed_indices(1000, 500, 256, ratio, np.random.default_rng(0))
    assert len(ri) + (0 if ii is None else len(ii)) == 256
    assert (0 if ii is None else len(ii)) == k_img


# -- training ----------------------------------------------------------------


def test_zero_iterations_returns_initial_policy(cfg, real, ens):
    zero = cfg.replace(trainer={"max_iterations": 0})
    res = tr.pemorl_train(zero, real, ens, seed=4)
    init = tr.learner_for(real, zero, zero.learner.lam, int(np.random.SeedSequence([4, 0xAC]).generate_state(2)[0]))
    assert res.log == []
    for k, v in res.policy.params.arrays().items():
        assert v.tobytes() == init.policy.params.arrays()[k].tobytes()


def test_training_is_deterministic(cfg, real, ens):
    a = tr.pemorl_train(cfg, real, ens, lam=1.0, seed=3)
    b = tr.pemorl_train(cfg, real, ens, lam=1.0, seed=3)
    assert a.log == b.log
    for k, v in a.policy.params.arrays().items():
        assert v.tobytes() == b.policy.params.arrays()[k].tobytes()
    assert len(a.log) == 3
    # imaginary data is regenerated, never accumulated
    assert all(0 < e["n_imaginary"] <= cfg.trainer.n_starts * cfg.trainer.rollout_horizon for e in a.log)


def test_training_needs_a_fitted_model(cfg, real):
    with pytest.raises(ValueError):
        tr.pemorl_train(cfg, real, None)
    with pytest.raises(ValueError):
        tr.pemorl_train(cfg, real, tr.EnsembleEnvironmentModel())


def test_divergence_aborts_with_log(cfg, real, ens, monkeypatch):
    calls = {"n": 0}

    def exploding(*args, **kw):
        calls["n"] += 1
        if calls["n"] > 4:
            raise FloatingPointError("Q loss is not finite")
        return 0.0

    monkeypatch.setattr(tr, "q_update", exploding)
    with pytest.raises(tr.TrainingDiverged) as info:
        tr.pemorl_train(cfg, real, ens, seed=0)
    assert len(info.value.log) == 1


def test_convergence_rule():
    assert tr._converged([100.0, 100.5, 100.2, 100.9, 101.0, 100.8], 5, 0.01)
    assert not tr._converged([100.0, 100.5, 103.0, 100.9, 101.0, 100.8], 5, 0.01)


# -- evaluation ----------------------------------------------------------------


@pytest.fixture(scope="module")
def sim_setup():
    cfg = SimConfig()
    bg = [BehaviorParams(1.0, 0.1)] * 2
    return cfg, bg, tr.constant_oracle(cfg, bg, tr.eval_seeds(0, 4))


def test_zero_policy_report(sim_setup):
    cfg, bg, oracle = sim_setup
    rep = tr.evaluate_policy(env.constant_policy(0.0), cfg, bg, 4, 0, oracle)
    assert rep.gmv == 0 and rep.cost == 0 and rep.roi == 0 and rep.online_rate == 1.0


def test_oracle_policy_scores_exactly_one(sim_setup):
    cfg, bg, oracle = sim_setup
    rep = tr.evaluate_policy(env.constant_policy(oracle.best_multiplier), cfg, bg, 4, 0, oracle)
    assert rep.r_over_rstar == 1.0
    for m in (0.3, 1.0, 2.2):
        r = tr.evaluate_policy(env.constant_policy(m), cfg, bg, 4, 0, oracle)
        assert r.r_over_rstar <= 1.0
        assert 0.0 <= r.online_rate <= 1.0
        if r.cost > 0:
            assert r.roi == pytest.approx(r.gmv / r.cost, abs=1e-9)


def test_report_fields_and_distance(sim_setup, real):
    cfg, bg, oracle = sim_setup
    rep = tr.evaluate_policy(env.constant_policy(1.0), cfg, bg, 4, 0, oracle, real, 16)
    d = rep.to_dict()
    assert len(d["episodes"]) == 4 and d["online_rate_definition"]
    assert rep.wasserstein_to_dr >= 0
    with pytest.raises(ValueError):
        tr.evaluate_policy(env.constant_policy(1.0), cfg, bg, 0, 0, oracle)


def test_lower_bound_check_rows(cfg, real, ens, policy):
    rows = tr.lower_bound_check(cfg, real, ens, policy, 1.0, 0)
    assert [r["policy"] for r in rows] == ["final", "random_0", "random_1", "random_2"]
    for r in rows:
        assert r["slack"] == pytest.approx(r["model_penalized_return"] - r["true_return"], abs=1e-12)


# -- baselines and comparison ------------------------------------------------------


def noiseless_sim():
    return SimConfig(value_log_sigma=0.0, poisson_impressions=False, affinity_floor=1.0, budget_spread=0.0)


@pytest.fixture(scope="module")
def noiseless_data():
    sim = noiseless_sim()
    beh = [BehaviorParams(m, 0.1) for m in (0.6, 1.0, 1.5)]
    return collect_real_data(sim, beh, 12, 0, background=[BehaviorParams(1.0, 0.2)] * 2)


def test_matched_gsp_proxy_is_exact_on_noiseless_data(noiseless_data):
    X, y = noiseless_data.model_xy()
    model = GSPProxyModel(noiseless_sim(), value_factor=1.0, impression_factor=1.0).fit(X, y)
    assert np.max(np.abs(model.predict(X) - y)) <= 1e-9
    mean, var = model.predict_dist(X)
    assert np.all(var == 1.0)


def test_doubled_value_scale_doubles_rewards(noiseless_data):
    X, y = noiseless_data.model_xy()
    model = GSPProxyModel(noiseless_sim(), value_factor=2.0, impression_factor=1.0).fit(X, y)
    assert model.predict(X)[:, -1].sum() / y[:, -1].sum() == pytest.approx(2.0, rel=1e-9)


def test_baseline_models(cfg, real):
    fc = tr.train_baseline_model("fc_non_pe", real, cfg, 0)
    pe_count = tr.pe_estimator(cfg.model).param_count(real.n_agents)
    assert abs(fc.n_params() - pe_count) <= 0.1 * pe_count
    rng = np.random.default_rng(0)
    inputs = [rng.normal(size=(3, STATE_DIM + 2)) for _ in range(5)]

    def f(x):
        mean, _ = fc._forward(fc.params_, x[None], 3, STATE_DIM)
        return mean.data[0, : 3 * STATE_DIM].reshape(3, STATE_DIM)

    assert check_equivariance(f, inputs, "pe").max_violation > 0
    gsp = tr.train_baseline_model("gsp_proxy", real, cfg)
    assert gsp.n_params() == 0 and gsp.value_factor == cfg.baseline.gsp_value_factor
    with pytest.raises(ValueError):
        tr.train_baseline_model("cnn", real, cfg)


def test_self_prediction_has_zero_error(noiseless_data):
    X, _ = noiseless_data.model_xy()
    model = GSPProxyModel(noiseless_sim(), 1.3, 0.8).fit(X)
    pred = model.predict(X)
    n = noiseless_data.n_agents
    own = DataSet(
        [Transition(t.s, t.a, float(p[-1]), 0.0, p[:-1]) for t, p in zip(noiseless_data.transitions, pred)],
        noiseless_data.meta,
    )
    rows = tr.compare_models({"gsp": model}, own)
    assert rows[0]["test_MAE"] == 0.0 and rows[0]["test_MSE"] == 0.0 and rows[0]["delta_G"] is None
    assert n == 3


def test_metrics_match_sklearn(real, ens):
    test = collect_real_data(SimConfig(), [BehaviorParams(2.0, 0.2)], 3, 9)
    rows = tr.compare_models({"ens": ens, "member": ens.members_[0]}, test, real)
    X, y = test.model_xy()
    for row, model in zip(rows, (ens, ens.members_[0])):
        p = model.predict(X)
        assert row["test_MAE"] == pytest.approx(mean_absolute_error(y.ravel(), p.ravel()), abs=1e-12)
        assert row["test_MSE"] == pytest.approx(mean_squared_error(y.ravel(), p.ravel()), abs=1e-12)
        assert row["delta_G"] == pytest.approx(row["test_MAE"] - row["train_MAE"], abs=1e-15)
    assert rows[0]["n_params"] == 2 * rows[1]["n_params"]


def test_benchmark_test_set_uses_broad_behaviors(cfg):
    train, test = tr.make_benchmark(cfg, 1)
    assert len(train.episode_ids()) == cfg.data.episodes and len(test.episode_ids()) == cfg.data.test_episodes
    assert test.meta["behaviors"] != train.meta["behaviors"]


# -- ablation ------------------------------------------------------------------


def test_single_lambda_single_row(cfg):
    res = tr.run_ablation(cfg, [0.0], [0])
    assert len(res.runs) == 1 and res.runs[0]["lam"] == 0.0
    assert len(tr.aggregate_ablation(res.runs)) == 1


def test_ablation_order_variants_and_parallel_equivalence(cfg):
    serial = tr.run_ablation(cfg, [3.0, 0.0], [0, 1], jobs=1, no_imaginary=True, lower_bound=True)
    assert [(r["seed"], r["variant"], r["lam"]) for r in serial.runs] == [
        (0, "pemorl", 0.0), (0, "pemorl", 3.0), (0, "no_imaginary", 3.0),
        (1, "pemorl", 0.0), (1, "pemorl", 3.0), (1, "no_imaginary", 3.0),
    ]
    assert all(r["GMV"] is not None and r["best_behavior_GMV"] > 0 for r in serial.runs)
    assert len(serial.lower_bound) == 8
    agg = tr.aggregate_ablation(serial.runs)
    assert [a["lam"] for a in agg] == [0.0, 3.0] and all(a["n_seeds"] == 2 for a in agg)
    parallel = tr.run_ablation(cfg, [3.0, 0.0], [0, 1], jobs=2, no_imaginary=True, lower_bound=True)
    assert parallel.runs == serial.runs and parallel.metrics == serial.metrics


def test_ablation_rejects_bad_lambdas(cfg):
    with pytest.raises(ValueError):
        tr.run_ablation(cfg, [], [0])
    with pytest.raises(ValueError):
        tr.run_ablation(cfg, [-1.0], [0])
    with pytest.raises(ValueError):
        tr.run_seeds(tr.ablation_seed, cfg, [0], 0)
