"""Ground-truth advertising system: second-price auctions with budgets.

``N`` advertisers bid on a Poisson number of impressions each step. Every
advertiser submits one bid multiplier per step; its eCPM for impression
``j`` is ``multiplier_i * v_ji``. The highest eCPM wins (ties go to the
larger advertiser id) and pays the runner-up eCPM divided by its own value.
The last advertiser (index ``N - 1``) is the representative one whose
observation is its own local state.

Local state layout (``STATE_FIELDS``)::

    time_left, budget_left, spend_speed, last_reward, last_cost, value_forecast
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

STATE_FIELDS = ("time_left", "budget_left", "spend_speed", "last_reward", "last_cost", "value_forecast")
STATE_DIM = len(STATE_FIELDS)
TIME_LEFT, BUDGET_LEFT, SPEND_SPEED, LAST_REWARD, LAST_COST, VALUE_FORECAST = range(STATE_DIM)


class EpisodeOver(RuntimeError):
    pass


@dataclass
class SimConfig:
    n_advertisers: int = 3
    horizon: int = 16
    mean_impressions: float = 20.0
    poisson_impressions: bool = True
    context_dim: int = 2
    value_log_mean: float = 0.0
    value_log_sigma: float = 0.5
    affinity_length: float = 1.0
    affinity_floor: float = 0.2
    traffic_amplitude: float = 0.5
    value_amplitude: float = 0.3
    budget_mean: float = 40.0
    budget_spread: float = 0.25
    reserve_price: float = 0.01
    w_max: float = 3.0

    def __post_init__(self):
        if self.n_advertisers < 2:
            raise ValueError("need at least two advertisers (one representative, one background)")
        if self.horizon < 1:
            raise ValueError("horizon T must be >= 1")
        if self.mean_impressions <= 0 or self.budget_mean <= 0:
            raise ValueError("mean_impressions and budget_mean must be positive")
        if not 0 <= self.budget_spread < 1:
            raise ValueError("budget_spread must lie in [0, 1)")


@dataclass(frozen=True)
class BehaviorParams:
    """Constant-multiplier bidding with Gaussian jitter."""

    mean: float = 1.0
    noise: float = 0.1

    def __post_init__(self):
        if not self.mean >= 0:
            raise ValueError(f"behavior mean must be >= 0, got {self.mean}")
        if not self.noise >= 0:
            raise ValueError(f"behavior noise must be >= 0, got {self.noise}")


@dataclass(frozen=True)
class AdvertiserContext:
    id: int
    x: np.ndarray
    budget: float
    behavior: BehaviorParams | None = None


@dataclass
class GlobalState:
    locals: np.ndarray  # (N, STATE_DIM)
    t: int

    @property
    def n(self) -> int:
        return self.locals.shape[0]

    def vector(self) -> np.ndarray:
        return self.locals.reshape(-1).copy()


@dataclass
class AuctionBatch:
    y: np.ndarray  # (M, context_dim)
    V: np.ndarray  # (M, N)


@dataclass
class StepOutcome:
    G: np.ndarray
    C: np.ndarray
    rewards: np.ndarray
    costs: np.ndarray
    excluded: np.ndarray  # advertisers knocked out by insufficient budget this step
    batch: AuctionBatch


# -- mechanism -------------------------------------------------------------


def _winner(ecpm: np.ndarray, ids: np.ndarray, eligible: np.ndarray) -> int:
    """Index of the highest eCPM among eligible bidders, ties to larger id."""
    best = -1
    for i in np.flatnonzero(eligible):
        if best < 0 or ecpm[i] > ecpm[best] or (ecpm[i] == ecpm[best] and ids[i] > ids[best]):
            best = i
    return best


def allocate(bids, batch: AuctionBatch, ids) -> np.ndarray:
    """One-slot allocation per impression: one-hot rows at the eCPM winner.

    Rows where every eCPM is zero stay all-zero (impression goes unsold).
    """
    bids = np.asarray(bids, dtype=np.float64)
    ids = np.asarray(ids)
    if np.any(bids < 0):
        raise ValueError("bids must be non-negative")
    V = batch.V
    G = np.zeros_like(V)
    ecpm = bids[None, :] * V
    for j in range(V.shape[0]):
        eligible = ecpm[j] > 0
        if eligible.any():
            G[j, _winner(ecpm[j], ids, eligible)] = 1.0
    return G


def _second_price(ecpm_row, v_win, winner, eligible, reserve, bid):
    others = eligible.copy()
    others[winner] = False
    if not others.any():
        return reserve
    return float(np.clip(ecpm_row[others].max() / v_win, 0.0, bid))


def price(bids, batch: AuctionBatch, G: np.ndarray, reserve: float = 0.01) -> np.ndarray:
    """Second-price cost matrix for allocation ``G``.

    The winner pays the runner-up eCPM divided by its own value, clipped to
    ``[0, bid]``; a lone bidder pays the reserve.
    """
    bids = np.asarray(bids, dtype=np.float64)
    V = batch.V
    ecpm = bids[None, :] * V
    C = np.zeros_like(V)
    for j in range(V.shape[0]):
        hits = np.flatnonzero(G[j])
        if hits.size == 0:
            continue
        w = int(hits[0])
        C[j, w] = _second_price(ecpm[j], V[j, w], w, ecpm[j] > 0, reserve, bids[w])
    return C


# -- impression process ----------------------------------------------------


def traffic_mean(cfg: SimConfig, t: int) -> float:
    return cfg.mean_impressions * (1.0 + cfg.traffic_amplitude * np.sin(2.0 * np.pi * t / cfg.horizon))


def value_scale(cfg: SimConfig, t: int) -> float:
    return 1.0 + cfg.value_amplitude * np.cos(2.0 * np.pi * t / cfg.horizon)


def affinity(cfg: SimConfig, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """``(M, N)`` affinities between impression contexts ``y`` and advertiser contexts ``x``."""
    d2 = ((y[:, None, :] - x[None, :, :]) ** 2).sum(-1)
    return cfg.affinity_floor + (1.0 - cfg.affinity_floor) * np.exp(-0.5 * d2 / cfg.affinity_length**2)


def expected_value(cfg: SimConfig, x: np.ndarray, t: int) -> np.ndarray:
    """Closed-form mean impression value per advertiser at step ``t`` (y ~ N(0, I))."""
    l2 = cfg.affinity_length**2
    d = cfg.context_dim
    gauss = (l2 / (l2 + 1.0)) ** (d / 2.0) * np.exp(-0.5 * (x**2).sum(-1) / (l2 + 1.0))
    mean_aff = cfg.affinity_floor + (1.0 - cfg.affinity_floor) * gauss
    base = np.exp(cfg.value_log_mean + 0.5 * cfg.value_log_sigma**2)
    return value_scale(cfg, t) * base * mean_aff


def draw_batch(cfg: SimConfig, contexts: Sequence[AdvertiserContext], t: int, rng: np.random.Generator) -> AuctionBatch:
    lam = traffic_mean(cfg, t)
    m = int(rng.poisson(lam)) if cfg.poisson_impressions else int(round(lam))
    y = rng.standard_normal((m, cfg.context_dim))
    base = np.exp(cfg.value_log_mean + cfg.value_log_sigma * rng.standard_normal(m))
    x = np.stack([c.x for c in contexts]) if contexts else np.zeros((0, cfg.context_dim))
    V = value_scale(cfg, t) * base[:, None] * affinity(cfg, x, y)
    return AuctionBatch(y=y, V=V)


# -- dynamics --------------------------------------------------------------


def initial_state(cfg: SimConfig, contexts: Sequence[AdvertiserContext]) -> GlobalState:
    x = np.stack([c.x for c in contexts])
    locals_ = np.zeros((len(contexts), STATE_DIM))
    locals_[:, TIME_LEFT] = 1.0
    locals_[:, BUDGET_LEFT] = 1.0
    locals_[:, VALUE_FORECAST] = expected_value(cfg, x, 0)
    return GlobalState(locals=locals_, t=0)


def resolve_auctions(bids, batch: AuctionBatch, ids, remaining, reserve: float):
    """Run impressions in order, dropping bidders who cannot afford a win.

    An advertiser whose remaining budget is below the price of an impression
    it would win is excluded from that impression and every later one in the
    step; the impression is then re-auctioned among the others.
    """
    bids = np.asarray(bids, dtype=np.float64)
    remaining = np.array(remaining, dtype=np.float64)
    V = batch.V
    M, N = V.shape
    G = np.zeros((M, N))
    C = np.zeros((M, N))
    active = (remaining > 0) & (bids > 0)
    excluded = np.zeros(N, dtype=bool)
    ecpm = bids[None, :] * V
    for j in range(M):
        while True:
            eligible = active & (ecpm[j] > 0)
            if not eligible.any():
                break
            w = _winner(ecpm[j], ids, eligible)
            p = _second_price(ecpm[j], V[j, w], w, eligible, reserve, bids[w])
            if p > remaining[w]:
                active[w] = False
                excluded[w] = True
                continue
            G[j, w] = 1.0
            C[j, w] = p
            remaining[w] -= p
            break
    return G, C, excluded


def step(
    gs: GlobalState,
    contexts: Sequence[AdvertiserContext],
    joint_bids,
    rng: np.random.Generator,
    cfg: SimConfig,
) -> tuple[StepOutcome, GlobalState]:
    """Advance one time step of the advertising system.

    Rewards are ``diag(G^T V)`` (won value) and costs the column sums of the
    cost matrix. The next local states depend only on these, the budgets and
    ``t``, so permuting advertisers (contexts, bids, local states together)
    permutes every output.
    """
    if gs.t >= cfg.horizon:
        raise EpisodeOver(f"step called at t={gs.t} >= T={cfg.horizon}")
    joint_bids = np.asarray(joint_bids, dtype=np.float64)
    if joint_bids.shape != (gs.n,) or not np.all(np.isfinite(joint_bids)) or np.any(joint_bids < 0):
        raise ValueError(f"joint bids must be {gs.n} finite non-negative values, got {joint_bids}")
    budgets = np.array([c.budget for c in contexts])
    ids = np.array([c.id for c in contexts])
    remaining = gs.locals[:, BUDGET_LEFT] * budgets
    batch = draw_batch(cfg, contexts, gs.t, rng)
    G, C, excluded = resolve_auctions(joint_bids, batch, ids, remaining, cfg.reserve_price)
    rewards = (G * batch.V).sum(axis=0)
    costs = C.sum(axis=0)
    remaining_next = np.maximum(remaining - costs, 0.0)

    t1 = gs.t + 1
    nxt = np.empty_like(gs.locals)
    nxt[:, TIME_LEFT] = 1.0 - t1 / cfg.horizon
    nxt[:, BUDGET_LEFT] = np.clip(remaining_next / budgets, 0.0, 1.0)
    nxt[:, SPEND_SPEED] = (budgets - remaining_next) / t1
    nxt[:, LAST_REWARD] = rewards
    nxt[:, LAST_COST] = costs
    nxt[:, VALUE_FORECAST] = expected_value(cfg, np.stack([c.x for c in contexts]), t1)
    outcome = StepOutcome(G=G, C=C, rewards=rewards, costs=costs, excluded=excluded, batch=batch)
    return outcome, GlobalState(locals=nxt, t=t1)


def observe(gs: GlobalState) -> np.ndarray:
    """The representative advertiser's local state (index ``N - 1``)."""
    return gs.locals[-1].copy()


def behavior_policy(obs, params: BehaviorParams, rng: np.random.Generator, w_max: float = 3.0) -> float:
    """Jittered constant multiplier ``clip(mean + noise * z, 0, w_max)``.

    A normal variate is consumed even when ``noise == 0`` so random streams
    line up across parameter settings.
    """
    z = rng.standard_normal()
    return float(np.clip(params.mean + params.noise * z, 0.0, w_max))


# -- episodes --------------------------------------------------------------


@dataclass
class StepRecord:
    t: int
    state: np.ndarray  # (N * STATE_DIM,)
    action: np.ndarray  # (N,)
    rewards: np.ndarray  # (N,)
    costs: np.ndarray  # (N,)
    next_state: np.ndarray
    rep_excluded: bool


@dataclass
class Episode:
    seed: int
    contexts: list
    steps: list = field(default_factory=list)

    @property
    def gmv(self) -> float:
        return float(sum(s.rewards[-1] for s in self.steps))

    @property
    def cost(self) -> float:
        return float(sum(s.costs[-1] for s in self.steps))

    @property
    def online_steps(self) -> int:
        """Steps completed before the representative ran out of budget."""
        for s in self.steps:
            if s.rep_excluded or s.next_state[-STATE_DIM + BUDGET_LEFT] <= 0.0:
                return s.t + (0 if s.rep_excluded else 1)
        return len(self.steps)


def episode_streams(seed: int):
    """Independent generators for contexts, impressions, background and representative bids."""
    ss = np.random.SeedSequence(seed)
    return [np.random.default_rng(s) for s in ss.spawn(4)]


def make_contexts(cfg: SimConfig, background: Sequence[BehaviorParams], rng: np.random.Generator) -> list:
    n = cfg.n_advertisers
    if len(background) != n - 1:
        raise ValueError(f"need {n - 1} background behavior params, got {len(background)}")
    xs = rng.standard_normal((n, cfg.context_dim))
    spread = rng.uniform(1.0 - cfg.budget_spread, 1.0 + cfg.budget_spread, size=n)
    out = []
    for i in range(n):
        budget = cfg.budget_mean * (1.0 if i == n - 1 else spread[i])
        out.append(AdvertiserContext(id=i, x=xs[i], budget=float(budget), behavior=background[i] if i < n - 1 else None))
    return out


Policy = Callable[[np.ndarray, np.random.Generator], float]


def run_episode(
    rep_policy: Policy,
    background: Sequence[BehaviorParams],
    cfg: SimConfig,
    seed: int,
    rep_budget: float | None = None,
) -> Episode:
    """Play one episode. ``rep_policy(obs, rng)`` returns the representative's multiplier."""
    ctx_rng, imp_rng, bg_rng, rep_rng = episode_streams(seed)
    contexts = make_contexts(cfg, background, ctx_rng)
    if rep_budget is not None:
        last = contexts[-1]
        contexts[-1] = AdvertiserContext(id=last.id, x=last.x, budget=float(rep_budget))
    gs = initial_state(cfg, contexts)
    ep = Episode(seed=seed, contexts=contexts)
    n = cfg.n_advertisers
    for _ in range(cfg.horizon):
        obs = observe(gs)
        bids = np.empty(n)
        for i in range(n - 1):
            bids[i] = behavior_policy(gs.locals[i], contexts[i].behavior, bg_rng, cfg.w_max)
        bids[-1] = float(np.clip(rep_policy(obs, rep_rng), 0.0, cfg.w_max))
        bids[gs.locals[:, BUDGET_LEFT] <= 0.0] = 0.0
        outcome, nxt = step(gs, contexts, bids, imp_rng, cfg)
        ep.steps.append(
            StepRecord(
                t=gs.t,
                state=gs.vector(),
                action=bids,
                rewards=outcome.rewards,
                costs=outcome.costs,
                next_state=nxt.vector(),
                rep_excluded=bool(outcome.excluded[-1]),
            )
        )
        gs = nxt
    return ep


def constant_policy(multiplier: float) -> Policy:
    return lambda obs, rng: multiplier


def behavior_as_policy(params: BehaviorParams, w_max: float = 3.0) -> Policy:
    return lambda obs, rng: behavior_policy(obs, params, rng, w_max)
