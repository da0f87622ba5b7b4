"""Critic, squashed-Gaussian actor and the uncertainty-penalized Bellman target.

Both networks see only the representative advertiser's observation (its
local state), standardized with statistics fixed at construction. Actions
are bid multipliers in ``[0, w_max]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffcore import ParamSet, adam_step, no_grad
from .diffcore import layers as L
from .diffcore import tensor as T
from .diffcore.tensor import Tensor

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0


@dataclass
class ObsScaler:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, obs: np.ndarray) -> "ObsScaler":
        obs = np.asarray(obs, dtype=np.float64)
        return cls(obs.mean(axis=0), np.maximum(obs.std(axis=0), 1e-3))

    @classmethod
    def identity(cls, dim: int) -> "ObsScaler":
        return cls(np.zeros(dim), np.ones(dim))

    def __call__(self, obs) -> np.ndarray:
        return (np.asarray(obs, dtype=np.float64) - self.mean) / self.scale


class QNetwork:
    """``Q(o, a) = value_scale * mlp([norm(o), a / w_max])``."""

    def __init__(self, obs_dim: int, hidden: int = 64, w_max: float = 3.0, value_scale: float = 1.0,
                 scaler: ObsScaler | None = None, seed: int = 0):
        self.obs_dim = obs_dim
        self.hidden = hidden
        self.w_max = float(w_max)
        self.value_scale = float(value_scale)
        self.scaler = scaler or ObsScaler.identity(obs_dim)
        rng = np.random.default_rng(seed)
        self.params = ParamSet(L.init_mlp(rng, [obs_dim + 1, hidden, hidden, 1], "q."))

    def forward(self, obs, action, params: ParamSet | None = None) -> Tensor:
        """``obs (..., obs_dim)`` and ``action (...)`` (array or tensor) to Q of shape ``(...)``."""
        params = params if params is not None else self.params
        o = T.as_tensor(self.scaler(obs))
        a = T.as_tensor(action) * (1.0 / self.w_max)
        x = T.concat([o, a.reshape(a.shape + (1,))], axis=-1)
        out = L.mlp(x, params, "q.", 3)
        return out.reshape(out.shape[:-1]) * self.value_scale

    def value(self, obs, action, params: ParamSet | None = None) -> np.ndarray:
        with no_grad():
            return self.forward(obs, action, params).data

    def value_grid(self, obs, grid, params: ParamSet | None = None) -> np.ndarray:
        """``Q(obs, g)`` for every grid action: ``(..., obs_dim) -> (..., len(grid))``.

        Plain numpy; the observation part of the first layer is computed once
        and the grid enters as a rank-one update.
        """
        p = params if params is not None else self.params
        w0 = p["q.0.w"].data
        h_obs = self.scaler(obs) @ w0[:-1] + p["q.0.b"].data
        h = np.maximum(h_obs[..., None, :] + (np.asarray(grid) / self.w_max)[:, None] * w0[-1], 0.0)
        shape = h.shape[:-1]
        h = h.reshape(-1, h.shape[-1])  # one large GEMM instead of many small ones
        h = np.maximum(h @ p["q.1.w"].data + p["q.1.b"].data, 0.0)
        return ((h @ p["q.2.w"].data)[:, 0] + p["q.2.b"].data[0]).reshape(shape) * self.value_scale


class Policy:
    """Squashed Gaussian: ``a = w_max * (tanh(u) + 1) / 2`` with ``u ~ N(mu(o), std(o))``."""

    def __init__(self, obs_dim: int, hidden: int = 64, w_max: float = 3.0, scaler: ObsScaler | None = None,
                 init_action: float | None = None, init_log_std: float = -1.0, seed: int = 0):
        self.obs_dim = obs_dim
        self.hidden = hidden
        self.w_max = float(w_max)
        self.scaler = scaler or ObsScaler.identity(obs_dim)
        rng = np.random.default_rng(seed)
        p = L.init_mlp(rng, [obs_dim, hidden, hidden, 2], "pi.", out_scale=0.01)
        if init_action is not None:
            frac = np.clip(init_action / self.w_max, 1e-3, 1 - 1e-3)
            p["pi.2.b"][0] = np.arctanh(2.0 * frac - 1.0)
        p["pi.2.b"][1] = init_log_std
        self.params = ParamSet(p)

    def _heads(self, obs, params=None):
        params = params if params is not None else self.params
        out = L.mlp(T.as_tensor(self.scaler(obs)), params, "pi.", 3, hidden_act="tanh")
        mu = out[..., 0]
        log_std = T.clip(out[..., 1], LOG_STD_MIN, LOG_STD_MAX)
        return mu, log_std

    def squash(self, u) -> Tensor:
        return (T.tanh(T.as_tensor(u)) + 1.0) * (0.5 * self.w_max)

    def rsample(self, obs, noise: np.ndarray) -> Tensor:
        """Reparameterized action for standard-normal ``noise``; differentiable in the parameters."""
        mu, log_std = self._heads(obs)
        return self.squash(mu + T.exp(log_std) * noise)

    def act(self, obs, mode: str = "mean", rng: np.random.Generator | None = None) -> np.ndarray:
        obs = np.asarray(obs, dtype=np.float64)
        if obs.ndim == 1:
            return self.act(obs[None, :], mode, rng)[0]
        with no_grad():
            mu, log_std = self._heads(obs)
            if mode == "mean":
                u = mu.data
            elif mode == "sample":
                if rng is None:
                    raise ValueError("sample mode needs an rng")
                u = mu.data + np.exp(log_std.data) * rng.standard_normal(mu.shape)
            else:
                raise ValueError(f"mode must be 'mean' or 'sample', got {mode!r}")
            # clip guards the boundary against rounding in tanh
            return np.clip(self.squash(u).data, 0.0, self.w_max)

    def as_env_policy(self, mode: str = "mean"):
        """Adapter to the simulator's ``policy(obs, rng) -> multiplier`` signature."""
        return lambda obs, rng: float(self.act(obs, mode, rng))


def act(policy: Policy, obs, mode: str = "mean", rng: np.random.Generator | None = None) -> np.ndarray:
    return policy.act(obs, mode, rng)


def action_grid(w_max: float = 3.0, n: int = 11) -> np.ndarray:
    if n < 2:
        raise ValueError("the action grid needs at least two points")
    return np.linspace(0.0, w_max, n)


@dataclass
class LearnerState:
    q: QNetwork
    q_target: ParamSet
    policy: Policy
    lam: float = 1.0
    gamma: float = 1.0
    alpha: float = 3e-4
    eta: float = 3e-4
    grid: np.ndarray = field(default_factory=action_grid)
    tau: float = 0.005

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        g = np.asarray(self.grid, dtype=np.float64)
        if g.size < 2 or np.any(np.diff(g) <= 0) or g[0] < 0 or g[-1] > self.q.w_max:
            raise ValueError("action grid must be sorted, inside [0, w_max], with >= 2 points")
        self.grid = g

    @classmethod
    def create(cls, obs_dim: int, lam: float, w_max: float = 3.0, hidden: int = 64, value_scale: float = 1.0,
               scaler: ObsScaler | None = None, init_action: float | None = None, seed: int = 0,
               **kw) -> "LearnerState":
        ss = np.random.SeedSequence(seed).generate_state(2)
        q = QNetwork(obs_dim, hidden, w_max, value_scale, scaler, seed=int(ss[0]))
        pol = Policy(obs_dim, hidden, w_max, scaler, init_action=init_action, seed=int(ss[1]))
        return cls(q=q, q_target=q.params.copy(), policy=pol, lam=lam, grid=action_grid(w_max, kw.pop("grid_size", 11)), **kw)


def grid_max(q: QNetwork, params: ParamSet, obs: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """``max_a' Q(obs, a')`` over the action grid; ``obs`` of shape ``(..., obs_dim)``."""
    return q.value_grid(obs, grid, params).max(axis=-1)


def robust_target(reward, sigma, next_obs_samples, terminal, learner: LearnerState) -> np.ndarray:
    """``(r - lam * sigma) + gamma * min_k max_a' Q_target(o'_k, a')``.

    ``next_obs_samples`` has shape ``(K, B, obs_dim)``: one sampled next
    observation per ensemble member. Terminal rows drop the bootstrap term.
    """
    reward = np.asarray(reward, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    boot = grid_max(learner.q, learner.q_target, np.asarray(next_obs_samples, dtype=np.float64), learner.grid).min(axis=0)
    boot = np.where(np.asarray(terminal, dtype=bool), 0.0, boot)
    return reward - learner.lam * sigma + learner.gamma * boot


def q_update(learner: LearnerState, obs, action, target, tau: float | None = None) -> float:
    """One Adam step on ``mean (Q(o, a) - target)^2`` then a Polyak target update."""
    target = np.asarray(target, dtype=np.float64)
    if not np.all(np.isfinite(target)):
        raise FloatingPointError("non-finite Q targets")
    q = learner.q
    q.params.zero_grad()
    resid = q.forward(obs, action) - target
    loss = T.tmean(T.square(resid * (1.0 / q.value_scale)))
    if not np.isfinite(loss.data):
        raise FloatingPointError("Q loss is not finite")
    loss.backward()
    adam_step(q.params, None, learner.alpha)
    learner.q_target.polyak_from(q.params, learner.tau if tau is None else tau)
    return loss.item()


def policy_update(learner: LearnerState, obs, rng: np.random.Generator) -> float:
    """One Adam step on ``mean -Q(o, pi(o))`` with the critic held fixed."""
    pol, q = learner.policy, learner.q
    obs = np.asarray(obs, dtype=np.float64)
    noise = rng.standard_normal(obs.shape[:-1])
    pol.params.zero_grad()
    a = pol.rsample(obs, noise)
    loss = -T.tmean(q.forward(obs, a)) * (1.0 / q.value_scale)
    if not np.isfinite(loss.data):
        raise FloatingPointError("policy loss is not finite")
    loss.backward()
    q.params.zero_grad()  # the critic only passes gradient through the action
    adam_step(pol.params, None, learner.eta)
    return loss.item()
