"""Hand-built analytic simulator used as a model baseline.

``GSPProxyModel`` predicts one step of the auction from the observed local
states alone: every impression of the step is treated as the mean
impression (value ``value_forecast * value_factor`` for each advertiser)
and the expected traffic is scaled by ``impression_factor``. The auctions
are then resolved exactly as in the simulator. Nothing is learned; the two
factors are the deliberate mis-specification.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from . import auction_env as env
from .auction_env import STATE_DIM, SimConfig
from .validation import check_model_input


class GSPProxyModel(RegressorMixin, BaseEstimator):
    """Mean-field second-price simulator with the same ``X -> y`` layout as the learned models.

    Budgets are taken to be ``sim.budget_mean`` for everyone. Predictions
    are points; ``predict_dist`` attaches a constant ``variance``.
    """

    def __init__(self, sim: SimConfig | None = None, value_factor: float = 1.5,
                 impression_factor: float = 0.7, variance: float = 1.0):
        self.sim = sim
        self.value_factor = value_factor
        self.impression_factor = impression_factor
        self.variance = variance

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=np.float64)
        n, rem = divmod(X.shape[1], STATE_DIM + 1)
        if rem or n < 1:
            raise ValueError(f"input width {X.shape[1]} is not N * ({STATE_DIM} + 1)")
        self.n_agents_ = n
        self.state_dim = STATE_DIM
        return self

    def _step(self, s: np.ndarray, a: np.ndarray, cfg: SimConfig) -> np.ndarray:
        n = len(a)
        t = int(round((1.0 - s[-1, env.TIME_LEFT]) * cfg.horizon))
        m = max(int(round(env.traffic_mean(cfg, t) * self.impression_factor)), 0)
        V = np.tile(s[:, env.VALUE_FORECAST] * self.value_factor, (m, 1))
        batch = env.AuctionBatch(y=np.zeros((m, cfg.context_dim)), V=V)
        budgets = np.full(n, cfg.budget_mean)
        remaining = s[:, env.BUDGET_LEFT] * budgets
        G, C, _ = env.resolve_auctions(a, batch, np.arange(n), remaining, cfg.reserve_price)
        rewards = (G * V).sum(axis=0)
        costs = C.sum(axis=0)
        rem_next = np.maximum(remaining - costs, 0.0)
        t1 = t + 1
        nxt = np.empty_like(s)
        nxt[:, env.TIME_LEFT] = 1.0 - t1 / cfg.horizon
        nxt[:, env.BUDGET_LEFT] = np.clip(rem_next / budgets, 0.0, 1.0)
        nxt[:, env.SPEND_SPEED] = (budgets - rem_next) / t1
        nxt[:, env.LAST_REWARD] = rewards
        nxt[:, env.LAST_COST] = costs
        # the forecast's time profile is known; only its level comes from the state
        nxt[:, env.VALUE_FORECAST] = s[:, env.VALUE_FORECAST] * env.value_scale(cfg, t1) / env.value_scale(cfg, t)
        return np.concatenate([nxt.reshape(-1), [rewards[-1]]])

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "n_agents_")
        cfg = self.sim or SimConfig()
        X = check_model_input(X, None, STATE_DIM, self.n_agents_)
        n = self.n_agents_
        S = X[:, : n * STATE_DIM].reshape(-1, n, STATE_DIM)
        A = np.clip(X[:, n * STATE_DIM:], 0.0, None)
        return np.stack([self._step(s, a, cfg) for s, a in zip(S, A)]) if len(X) else np.zeros((0, n * STATE_DIM + 1))

    def predict_dist(self, X) -> tuple[np.ndarray, np.ndarray]:
        mean = self.predict(X)
        return mean, np.full_like(mean, float(self.variance))

    def n_params(self) -> int:
        return 0
