"""Model learning, imaginary rollouts, robust actor-critic training and evaluation.

The outer loop alternates between branching short rollouts from real
start states through the learned ensemble (with uncertainty-penalized
rewards) and actor-critic updates on minibatches that mix real and
imaginary transitions at a fixed ratio.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import auction_env as env
from .auction_env import STATE_DIM, BehaviorParams, SimConfig
from .config import ModelConfig, RunConfig
from .dataset import DataSet, Transition, collect_real_data, episode_seed, sliced_wasserstein
from .baselines import GSPProxyModel
from .env_model import EnsembleEnvironmentModel, FCEnvironmentModel, PEEnvironmentModel
from .offline_rl import LearnerState, ObsScaler, Policy, policy_update, q_update, robust_target

log = logging.getLogger(__name__)

ONLINE_RATE_DEFINITION = "mean fraction of the horizon completed before the representative's budget ran out"

# bounds of the local-state fields; model samples are projected onto them
_LO = np.array([0.0, 0.0, 0.0, 0.0, 0.0, 0.0])
_HI = np.array([1.0, 1.0, np.inf, np.inf, np.inf, np.inf])


def project_locals(s: np.ndarray) -> np.ndarray:
    """Clip flattened or ``(..., ds)`` local states to their valid ranges."""
    shape = s.shape
    x = s.reshape(shape[:-1] + (-1, STATE_DIM))
    return np.clip(x, _LO, _HI).reshape(shape)


def rep_slice(n: int) -> slice:
    return slice((n - 1) * STATE_DIM, n * STATE_DIM)


# -- data and models -------------------------------------------------------


def make_real_data(cfg: RunConfig, seed: int | None = None) -> DataSet:
    seed = cfg.seed if seed is None else seed
    return collect_real_data(
        cfg.sim, cfg.data.behavior_params(), cfg.data.episodes, seed,
        background=cfg.data.background_params(cfg.sim.n_advertisers),
    )


def pe_estimator(mc: ModelConfig, state_dim: int = STATE_DIM, random_state: int = 0) -> PEEnvironmentModel:
    return PEEnvironmentModel(
        state_dim=state_dim, embed_dim=mc.embed_dim, n_heads=mc.n_heads, hidden=mc.hidden,
        n_encoders=mc.n_encoders, layer_norm=mc.layer_norm, covariance=mc.covariance, epochs=mc.epochs,
        batch_size=mc.batch_size, lr=mc.lr, val_fraction=mc.val_fraction, random_state=random_state,
    )


def fit_ensemble(ds: DataSet, mc: ModelConfig, seed: int) -> EnsembleEnvironmentModel:
    X, y = ds.model_xy()
    ens = EnsembleEnvironmentModel(pe_estimator(mc, ds.state_dim), n_members=mc.n_members, random_state=seed)
    return ens.fit(X, y)


# -- replay arrays ---------------------------------------------------------


@dataclass
class Replay:
    """Learner-side view of transitions.

    ``next_mean``/``next_var`` hold every ensemble member's Gaussian over the
    representative's next observation, ``(K, B, ds)``, so targets can draw a
    fresh set of next states without re-running the model.
    """

    obs: np.ndarray
    act: np.ndarray
    reward: np.ndarray
    sigma: np.ndarray
    terminal: np.ndarray
    next_mean: np.ndarray
    next_var: np.ndarray

    def __len__(self) -> int:
        return len(self.act)

    def take(self, idx) -> "Replay":
        return Replay(
            self.obs[idx], self.act[idx], self.reward[idx], self.sigma[idx], self.terminal[idx],
            self.next_mean[:, idx], self.next_var[:, idx],
        )

    @staticmethod
    def concat(parts) -> "Replay":
        parts = [p for p in parts if len(p)]
        return Replay(
            *(np.concatenate([getattr(p, f) for p in parts]) for f in ("obs", "act", "reward", "sigma", "terminal")),
            np.concatenate([p.next_mean for p in parts], axis=1),
            np.concatenate([p.next_var for p in parts], axis=1),
        )


def real_replay(ds: DataSet, ens: EnsembleEnvironmentModel, horizon: int) -> Replay:
    """Logged rewards (never penalized) with ensemble next-state moments at each ``(s, a)``."""
    arr = ds.arrays()
    n = ds.n_agents
    means, vars_ = ens.predict_members(np.hstack([arr["s"], arr["a"]]))
    sl = rep_slice(n)
    return Replay(
        obs=arr["s"][:, sl], act=arr["a"][:, -1], reward=arr["r"], sigma=np.zeros(len(ds)),
        terminal=arr["t"] >= horizon - 1, next_mean=means[:, :, sl], next_var=vars_[:, :, sl],
    )


def _model_rollout(ens, act_fn, real: DataSet, s, t, h: int, lam: float, rng: np.random.Generator):
    """Yield one step of ``h``-step ensemble rollouts at a time.

    ``act_fn(rep_obs) -> actions`` drives the representative; background
    advertisers replay their known behavior parameters and depleted
    advertisers bid zero, as in the simulator. Each yielded tuple is
    ``(s, a, r_hat, sigma, s_next, t, origin, terminal)``; rollouts stop at
    the end of the episode.
    """
    n, T = real.n_agents, int(real.meta["T"])
    w_max = float(real.meta["sim"]["w_max"])
    bg = [BehaviorParams(**b) for b in real.meta["background"]]
    bg_mean = np.array([b.mean for b in bg])
    bg_noise = np.array([b.noise for b in bg])
    sl = rep_slice(n)
    origin = np.arange(len(s))
    for _ in range(h):
        if len(s) == 0:
            return
        locals_ = s.reshape(len(s), n, STATE_DIM)
        a = np.empty((len(s), n))
        a[:, :-1] = np.clip(bg_mean + bg_noise * rng.standard_normal((len(s), n - 1)), 0.0, w_max)
        a[:, -1] = act_fn(s[:, sl])
        a[locals_[:, :, env.BUDGET_LEFT] <= 0.0] = 0.0
        X = np.hstack([s, a])
        moments = ens.predict_members(X)
        s_next, r_hat, _ = ens.sample(X, rng, moments)
        s_next = project_locals(s_next)
        sigma = ens.reward_uncertainty(X, moments)
        terminal = t >= T - 1
        yield s, a, r_hat, sigma, s_next, t, origin, terminal, moments
        keep = ~terminal
        s, t, origin = s_next[keep], t[keep] + 1, origin[keep]


def rollout_imaginary(
    ens: EnsembleEnvironmentModel,
    policy: Policy,
    real: DataSet,
    h: int,
    lam: float,
    n_starts: int,
    rng: np.random.Generator,
) -> tuple[DataSet, Replay]:
    """Branch ``h``-step rollouts through the ensemble from uniformly drawn real states.

    The representative acts with ``policy`` (sample mode); background
    advertisers replay their known behavior parameters. Each stored reward
    is ``r_hat - lam * sigma_hat`` with ``r_hat`` the chosen member's sample.
    """
    if h < 1:
        raise ValueError("rollout horizon must be >= 1")
    arr = real.arrays()
    n = real.n_agents
    start = rng.integers(len(real), size=n_starts)
    sl = rep_slice(n)
    transitions, parts = [], []
    steps = _model_rollout(ens, lambda o: policy.act(o, "sample", rng), real, arr["s"][start], arr["t"][start].copy(), h, lam, rng)
    for s, a, r_hat, sigma, s_next, t, origin, terminal, moments in steps:
        r_pen = r_hat - lam * sigma
        parts.append(Replay(
            obs=s[:, sl], act=a[:, -1], reward=r_hat, sigma=sigma, terminal=terminal,
            next_mean=moments[0][:, :, sl], next_var=moments[1][:, :, sl],
        ))
        for k in range(len(s)):
            # the model predicts rewards only; costs show up through budget_left
            transitions.append(Transition(
                s=s[k], a=a[k], r=float(r_pen[k]), c=0.0, s_next=s_next[k],
                kind="imaginary_penalized", ep=int(origin[k]), t=int(t[k]),
            ))
    meta = {"N": n, "ds": STATE_DIM, "T": int(real.meta["T"]), "lam": float(lam), "h": int(h), "generator": "ensemble rollouts"}
    return DataSet(transitions, meta), (Replay.concat(parts) if parts else None)


def model_return(ens: EnsembleEnvironmentModel, act_fn, real: DataSet, lam: float, rng: np.random.Generator) -> float:
    """Mean penalized return of full-episode ensemble rollouts from the real initial states."""
    arr = real.arrays()
    first = arr["t"] == 0
    s0 = arr["s"][first]
    total = np.zeros(len(s0))
    for _, _, r_hat, sigma, _, _, origin, _, _ in _model_rollout(
        ens, act_fn, real, s0, arr["t"][first].copy(), int(real.meta["T"]), lam, rng
    ):
        np.add.at(total, origin, r_hat - lam * sigma)
    return float(total.mean())


# -- actor-critic loop -----------------------------------------------------


def learner_for(real: DataSet, cfg: RunConfig, lam: float, seed: int) -> LearnerState:
    arr = real.arrays()
    sl = rep_slice(real.n_agents)
    ep_returns = np.bincount(arr["ep"], weights=arr["r"])
    value_scale = max(float(np.mean(ep_returns[ep_returns != 0])) if np.any(ep_returns) else 1.0, 1.0)
    lc = cfg.learner
    return LearnerState.create(
        STATE_DIM, lam=lam, w_max=cfg.sim.w_max, hidden=lc.hidden, value_scale=value_scale,
        scaler=ObsScaler.fit(arr["s"][:, sl]), init_action=float(np.mean(arr["a"][:, -1])), seed=seed,
        gamma=lc.gamma, alpha=lc.alpha, eta=lc.eta, tau=lc.tau, grid_size=lc.grid_size,
    )


def sample_targets(batch: Replay, learner: LearnerState, rng: np.random.Generator) -> np.ndarray:
    nxt = batch.next_mean + np.sqrt(batch.next_var) * rng.standard_normal(batch.next_mean.shape)
    return robust_target(batch.reward, batch.sigma, project_locals(nxt), batch.terminal, learner)


def mixed_indices(n_real: int, n_img: int, batch_size: int, ratio: float, rng: np.random.Generator):
    """Row indices for one minibatch with ``round(ratio * batch_size)`` imaginary rows."""
    k_img = int(round(ratio * batch_size)) if n_img else 0
    return rng.integers(n_real, size=batch_size - k_img), rng.integers(n_img, size=k_img) if k_img else None


class TrainingDiverged(RuntimeError):
    """Non-finite losses or targets; ``log`` holds the iterations completed so far."""

    def __init__(self, message: str, log_entries: list):
        super().__init__(message)
        self.log = log_entries


@dataclass
class TrainResult:
    policy: Policy
    learner: LearnerState
    log: list = field(default_factory=list)
    converged: bool = False


def initial_observations(real: DataSet) -> np.ndarray:
    arr = real.arrays()
    return arr["s"][arr["t"] == 0][:, rep_slice(real.n_agents)]


def pemorl_train(
    cfg: RunConfig,
    real: DataSet,
    ens: EnsembleEnvironmentModel | None,
    lam: float | None = None,
    seed: int | None = None,
) -> TrainResult:
    """Robust offline actor-critic against the learned ensemble.

    Stops once the model-evaluated return (mean critic value of the current
    policy at the real initial observations) has moved less than
    ``conv_tol`` relative per iteration over ``conv_window`` iterations,
    after at least ``min_iterations``, or at ``max_iterations``.
    """
    if ens is None or not hasattr(ens, "members_"):
        raise ValueError("pemorl_train needs a fitted ensemble")
    tc = cfg.trainer
    lam = cfg.learner.lam if lam is None else float(lam)
    seed = cfg.seed if seed is None else int(seed)
    ss = np.random.SeedSequence([seed, 0xAC])
    init_seed, loop_seed = ss.generate_state(2)
    learner = learner_for(real, cfg, lam, int(init_seed))
    rng = np.random.default_rng(int(loop_seed))
    result = TrainResult(policy=learner.policy, learner=learner)
    if tc.max_iterations == 0:
        return result
    real_rb = real_replay(real, ens, int(real.meta["T"]))
    obs0 = initial_observations(real)
    history = []
    for it in range(1, tc.max_iterations + 1):
        img_rb = None
        if tc.mix_ratio > 0:
            _, img_rb = rollout_imaginary(ens, learner.policy, real, tc.rollout_horizon, lam, tc.n_starts, rng)
        n_img = len(img_rb) if img_rb is not None else 0
        q_losses, pi_losses = [], []
        try:
            for k in range(max(tc.q_steps, tc.policy_steps)):
                ri, ii = mixed_indices(len(real_rb), n_img, tc.batch_size, tc.mix_ratio, rng)
                batch = real_rb.take(ri) if ii is None else Replay.concat([real_rb.take(ri), img_rb.take(ii)])
                if k < tc.q_steps:
                    q_losses.append(q_update(learner, batch.obs, batch.act, sample_targets(batch, learner, rng)))
                if k < tc.policy_steps:
                    pi_losses.append(policy_update(learner, batch.obs, rng))
        except FloatingPointError as exc:
            log.error("training diverged at iteration %d: %s", it, exc)
            raise TrainingDiverged(f"iteration {it}: {exc}", result.log) from exc
        a0 = learner.policy.act(obs0, "mean")
        model_return = float(np.mean(learner.q.value(obs0, a0)))
        entry = {
            "iteration": it,
            "q_loss": float(np.mean(q_losses)) if q_losses else 0.0,
            "policy_loss": float(np.mean(pi_losses)) if pi_losses else 0.0,
            "model_return": model_return,
            "mean_action0": float(np.mean(a0)),
            "imaginary_reward": float(np.mean(img_rb.reward - lam * img_rb.sigma)) if n_img else 0.0,
            "imaginary_sigma": float(np.mean(img_rb.sigma)) if n_img else 0.0,
            "n_imaginary": n_img,
        }
        result.log.append(entry)
        history.append(model_return)
        if it >= max(tc.min_iterations, tc.conv_window + 1) and _converged(history, tc.conv_window, tc.conv_tol):
            result.converged = True
            break
    return result


def _converged(history, window: int, tol: float) -> bool:
    h = np.asarray(history[-(window + 1):])
    rel = np.abs(np.diff(h)) / np.maximum(np.abs(h[:-1]), 1e-8)
    return bool(np.all(rel < tol))


# -- ground-truth evaluation -----------------------------------------------


def eval_seeds(seed: int, episodes: int) -> list:
    # offset keeps evaluation episodes disjoint from data-collection episodes
    return [episode_seed(seed + 1_000_003, e) for e in range(episodes)]


def run_policy(policy_fn, cfg: SimConfig, background, seeds) -> list:
    return [env.run_episode(policy_fn, background, cfg, s) for s in seeds]


@dataclass
class Oracle:
    grid: np.ndarray
    gmv: np.ndarray  # mean GMV per grid multiplier

    @property
    def best(self) -> float:
        return float(self.gmv.max())

    @property
    def best_multiplier(self) -> float:
        return float(self.grid[int(np.argmax(self.gmv))])


def constant_oracle(cfg: SimConfig, background, seeds, n_grid: int = 31) -> Oracle:
    """Brute-force best constant multiplier over ``n_grid`` points on ``[0, w_max]``."""
    grid = np.linspace(0.0, cfg.w_max, n_grid)
    gmv = np.array([np.mean([ep.gmv for ep in run_policy(env.constant_policy(m), cfg, background, seeds)]) for m in grid])
    return Oracle(grid=grid, gmv=gmv)


@dataclass
class EvalReport:
    gmv: float
    cost: float
    roi: float
    online_rate: float
    r_over_rstar: float
    rstar: float
    wasserstein_to_dr: float | None
    episodes: list
    online_rate_definition: str = ONLINE_RATE_DEFINITION

    def to_dict(self) -> dict:
        return {
            "GMV": self.gmv, "Cost": self.cost, "ROI": self.roi, "online_rate": self.online_rate,
            "online_rate_definition": self.online_rate_definition, "R_over_Rstar": self.r_over_rstar,
            "Rstar": self.rstar, "wasserstein_to_DR": self.wasserstein_to_dr, "episodes": self.episodes,
        }


def evaluate_policy(
    policy_fn,
    cfg: SimConfig,
    background,
    episodes: int,
    seed: int,
    oracle: Oracle | None = None,
    real: DataSet | None = None,
    n_projections: int = 128,
) -> EvalReport:
    """Ground-truth GMV, Cost, ROI, online rate and R/R* over seeded episodes.

    ``policy_fn(obs, rng)`` is a simulator policy; for learned policies pass
    ``policy.as_env_policy("mean")``. ROI is 0 when nothing was spent. The
    Wasserstein distance compares the representative's visited observations
    with those in ``real``.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    seeds = eval_seeds(seed, episodes)
    eps = run_policy(policy_fn, cfg, background, seeds)
    oracle = oracle if oracle is not None else constant_oracle(cfg, background, seeds)
    gmv = float(np.mean([e.gmv for e in eps]))
    cost = float(np.mean([e.cost for e in eps]))
    online = float(np.mean([e.online_steps / cfg.horizon for e in eps]))
    w = None
    if real is not None:
        visited = np.stack([st.state[rep_slice(cfg.n_advertisers)] for e in eps for st in e.steps])
        logged = real.arrays()["s"][:, rep_slice(real.n_agents)]
        w = sliced_wasserstein(visited, logged, n_projections, seed=seed)
    table = [
        {"seed": int(s), "GMV": e.gmv, "Cost": e.cost, "online_steps": e.online_steps}
        for s, e in zip(seeds, eps)
    ]
    return EvalReport(
        gmv=gmv, cost=cost, roi=gmv / cost if cost > 0 else 0.0, online_rate=online,
        r_over_rstar=gmv / oracle.best if oracle.best > 0 else 0.0, rstar=oracle.best,
        wasserstein_to_dr=w, episodes=table,
    )


def behavior_gmv(cfg: RunConfig, seed: int) -> list:
    """Ground-truth mean GMV of every data-collection behavior on the evaluation seeds."""
    seeds = eval_seeds(seed, cfg.trainer.eval_episodes)
    bg = cfg.data.background_params(cfg.sim.n_advertisers)
    return [
        float(np.mean([e.gmv for e in run_policy(env.behavior_as_policy(b, cfg.sim.w_max), cfg.sim, bg, seeds)]))
        for b in cfg.data.behavior_params()
    ]


def lower_bound_check(
    cfg: RunConfig,
    real: DataSet,
    ens: EnsembleEnvironmentModel,
    policy: Policy,
    lam: float,
    seed: int,
    n_random: int = 3,
) -> list:
    """Compare ground-truth returns with model-evaluated penalized returns.

    Covers ``policy`` and ``n_random`` randomly initialized policies. The
    returned ``slack = model_return - true_return`` is positive when the
    penalized model return overestimates; it is reported, never asserted.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x1B]))
    bg = cfg.data.background_params(cfg.sim.n_advertisers)
    policies = [("final", policy)]
    for k in range(n_random):
        init = float(rng.uniform(0.2, 0.8 * cfg.sim.w_max))
        policies.append((f"random_{k}", Policy(
            STATE_DIM, cfg.learner.hidden, cfg.sim.w_max, policy.scaler, init_action=init, seed=int(rng.integers(2**31)),
        )))
    rows = []
    for name, pol in policies:
        m_ret = model_return(ens, lambda o, p=pol: p.act(o, "mean"), real, lam, rng)
        true = evaluate_policy(pol.as_env_policy("mean"), cfg.sim, bg, cfg.trainer.eval_episodes, seed,
                               oracle=Oracle(np.zeros(1), np.ones(1)))
        rows.append({"policy": name, "true_return": true.gmv, "model_penalized_return": m_ret,
                     "slack": m_ret - true.gmv, "lam": float(lam)})
    return rows


# -- model baselines and comparison ----------------------------------------


def train_baseline_model(kind: str, real: DataSet, cfg: RunConfig, seed: int | None = None):
    """``fc_non_pe``: dense model size-matched to the PE model; ``gsp_proxy``: mis-specified analytic simulator."""
    seed = cfg.seed if seed is None else seed
    X, y = real.model_xy()
    if kind == "fc_non_pe":
        mc = cfg.model
        target = pe_estimator(mc, real.state_dim).param_count(real.n_agents)
        fc = FCEnvironmentModel(
            state_dim=real.state_dim, hidden=None, match_params=target, epochs=mc.epochs,
            batch_size=mc.batch_size, lr=mc.lr, val_fraction=mc.val_fraction, random_state=seed,
        )
        return fc.fit(X, y)
    if kind == "gsp_proxy":
        b = cfg.baseline
        return GSPProxyModel(cfg.sim, b.gsp_value_factor, b.gsp_impression_factor, b.gsp_variance).fit(X, y)
    raise ValueError(f"unknown baseline kind {kind!r}; expected 'fc_non_pe' or 'gsp_proxy'")


def prediction_errors(model, ds: DataSet) -> tuple[float, float]:
    """MAE and MSE over the concatenated ``(next state, reward)`` targets."""
    X, y = ds.model_xy()
    err = model.predict(X) - y
    return float(np.mean(np.abs(err))), float(np.mean(err**2))


def compare_models(models: dict, test: DataSet, train: DataSet | None = None) -> list:
    """One row per model with test MAE/MSE and, given ``train``, the gap ``delta_G = test MAE - train MAE``."""
    rows = []
    for name, model in models.items():
        mae, mse = prediction_errors(model, test)
        row = {"model": name, "n_params": _n_params(model), "test_MAE": mae, "test_MSE": mse,
               "train_MAE": None, "train_MSE": None, "delta_G": None}
        if train is not None:
            tr_mae, tr_mse = prediction_errors(model, train)
            row.update(train_MAE=tr_mae, train_MSE=tr_mse, delta_G=mae - tr_mae)
        rows.append(row)
    return rows


def _n_params(model) -> int:
    if isinstance(model, EnsembleEnvironmentModel):
        return sum(m.n_params() for m in model.members_)
    return int(model.n_params())


def make_benchmark(cfg: RunConfig, seed: int) -> tuple[DataSet, DataSet]:
    """Training data from the narrow behaviors and a test set from the broad ones."""
    bg = cfg.data.background_params(cfg.sim.n_advertisers)
    train = collect_real_data(cfg.sim, cfg.data.behavior_params(), cfg.data.episodes, seed, background=bg)
    # a distinct seed stream keeps test episodes disjoint from training episodes
    test = collect_real_data(cfg.sim, cfg.data.test_behavior_params(), cfg.data.test_episodes, seed + 500_009, background=bg)
    return train, test


def model_comparison_seed(cfg: RunConfig, seed: int) -> list:
    """Fit the PE model and both baselines on one seed's benchmark and compare them."""
    train, test = make_benchmark(cfg, seed)
    X, y = train.model_xy()
    models = {
        "pe": pe_estimator(cfg.model, train.state_dim, random_state=seed).fit(X, y),
        "fc_non_pe": train_baseline_model("fc_non_pe", train, cfg, seed),
        "gsp_proxy": train_baseline_model("gsp_proxy", train, cfg, seed),
    }
    rows = compare_models(models, test, train)
    for r in rows:
        r["seed"] = seed
    return rows


def run_model_comparison(cfg: RunConfig, seeds, jobs: int = 1) -> list:
    return [r for part in run_seeds(model_comparison_seed, cfg, seeds, jobs) for r in part]


# -- ablation ----------------------------------------------------------------


@dataclass
class SeedRun:
    runs: list
    metrics: list
    lower_bound: list


def ablation_seed(cfg: RunConfig, seed: int, lambdas, no_imaginary: bool = False, lower_bound: bool = False) -> SeedRun:
    """Every ``lambda`` on one seed with a shared dataset, ensemble and oracle.

    ``no_imaginary`` adds a run with mixing ratio 0 at the configured lambda.
    """
    real = make_real_data(cfg, seed)
    ens = fit_ensemble(real, cfg.model, seed)
    bg = cfg.data.background_params(cfg.sim.n_advertisers)
    oracle = constant_oracle(cfg.sim, bg, eval_seeds(seed, cfg.trainer.eval_episodes))
    best_behavior = max(behavior_gmv(cfg, seed))
    variants = [("pemorl", float(lam), cfg) for lam in lambdas]
    if no_imaginary:
        variants.append(("no_imaginary", float(cfg.learner.lam), cfg.replace(trainer={"mix_ratio": 0.0})))
    out = SeedRun([], [], [])
    for variant, lam, vcfg in variants:
        res = pemorl_train(vcfg, real, ens, lam=lam, seed=seed)
        rep = evaluate_policy(res.policy.as_env_policy("mean"), vcfg.sim, bg, vcfg.trainer.eval_episodes, seed,
                              oracle, real, vcfg.trainer.n_projections)
        out.runs.append({
            "seed": seed, "variant": variant, "lam": lam, "GMV": rep.gmv, "Cost": rep.cost, "ROI": rep.roi,
            "online_rate": rep.online_rate, "R_over_Rstar": rep.r_over_rstar, "Rstar": rep.rstar,
            "wasserstein_to_DR": rep.wasserstein_to_dr, "best_behavior_GMV": best_behavior,
            "iterations": len(res.log), "converged": int(res.converged),
        })
        for entry in res.log:
            out.metrics.append({"seed": seed, "variant": variant, "lam": lam, **entry})
        if lower_bound and variant == "pemorl" and lam == float(cfg.learner.lam):
            for row in lower_bound_check(vcfg, real, ens, res.policy, lam, seed):
                out.lower_bound.append({"seed": seed, **row})
    return out


def run_ablation(cfg: RunConfig, lambdas, seeds, jobs: int = 1, no_imaginary: bool = False,
                 lower_bound: bool = False) -> SeedRun:
    """Full training and evaluation per ``(seed, lambda)``; rows come back in seed then lambda order."""
    lambdas = sorted(float(x) for x in lambdas)
    if not lambdas:
        raise ValueError("need at least one lambda")
    if any(x < 0 for x in lambdas):
        raise ValueError("lambda values must be >= 0")
    parts = run_seeds(ablation_seed, cfg, seeds, jobs, lambdas, no_imaginary, lower_bound)
    return SeedRun(
        [r for p in parts for r in p.runs],
        [r for p in parts for r in p.metrics],
        [r for p in parts for r in p.lower_bound],
    )


def aggregate_ablation(runs: list) -> list:
    """Per-lambda means (and R/R* spread) over seeds of the ``pemorl`` runs."""
    rows = []
    for lam in sorted({r["lam"] for r in runs if r["variant"] == "pemorl"}):
        sel = [r for r in runs if r["variant"] == "pemorl" and r["lam"] == lam]
        rr = np.array([r["R_over_Rstar"] for r in sel])
        rows.append({
            "lam": lam, "n_seeds": len(sel), "R_over_Rstar": float(rr.mean()), "R_over_Rstar_std": float(rr.std()),
            "online_rate": float(np.mean([r["online_rate"] for r in sel])),
            "GMV": float(np.mean([r["GMV"] for r in sel])),
            "Cost": float(np.mean([r["Cost"] for r in sel])),
        })
    return rows


# -- seed-parallel execution -----------------------------------------------


def run_seeds(fn, cfg: RunConfig, seeds, jobs: int = 1, *args) -> list:
    """``[fn(cfg, seed, *args) for seed in seeds]``, on up to ``jobs`` worker processes.

    Results are returned in seed order whatever the completion order, so
    outputs do not depend on ``jobs``.
    """
    seeds = [int(s) for s in seeds]
    if jobs < 1:
        raise ValueError("jobs must be >= 1")
    if jobs == 1 or len(seeds) <= 1:
        return [fn(cfg, s, *args) for s in seeds]
    with ProcessPoolExecutor(max_workers=min(jobs, len(seeds))) as pool:
        futures = [pool.submit(fn, cfg, s, *args) for s in seeds]
        return [f.result() for f in futures]
