"""Offline transition store, JSON-lines I/O, episode splits and trajectory distances."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .auction_env import (
    STATE_DIM,
    BehaviorParams,
    SimConfig,
    behavior_as_policy,
    run_episode,
)

KINDS = ("real", "imaginary", "imaginary_penalized")


class SchemaError(ValueError):
    """A data file or transition does not match the declared layout."""


@dataclass
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    c: float
    s_next: np.ndarray
    kind: str = "real"
    ep: int = 0
    t: int = 0

    def __eq__(self, other):
        if not isinstance(other, Transition):
            return NotImplemented
        return (
            np.array_equal(self.s, other.s)
            and np.array_equal(self.a, other.a)
            and self.r == other.r
            and self.c == other.c
            and np.array_equal(self.s_next, other.s_next)
            and (self.kind, self.ep, self.t) == (other.kind, other.ep, other.t)
        )


@dataclass
class DataSet:
    transitions: list
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n, ds = self.meta.get("N"), self.meta.get("ds", STATE_DIM)
        for k, tr in enumerate(self.transitions):
            if tr.kind not in KINDS:
                raise SchemaError(f"transition {k}: unknown kind {tr.kind!r}")
            if n is not None and (tr.s.shape != (n * ds,) or tr.s_next.shape != (n * ds,) or tr.a.shape != (n,)):
                raise SchemaError(
                    f"transition {k}: dims s={tr.s.shape} a={tr.a.shape} s_next={tr.s_next.shape} "
                    f"do not match N={n}, ds={ds}"
                )
            if not np.isfinite(tr.r):
                raise SchemaError(f"transition {k}: non-finite reward")

    def __len__(self) -> int:
        return len(self.transitions)

    def __eq__(self, other):
        if not isinstance(other, DataSet):
            return NotImplemented
        return self.meta == other.meta and self.transitions == other.transitions

    @property
    def n_agents(self) -> int:
        return int(self.meta["N"])

    @property
    def state_dim(self) -> int:
        return int(self.meta.get("ds", STATE_DIM))

    def episode_ids(self) -> list:
        return sorted({tr.ep for tr in self.transitions})

    def subset(self, episodes: Iterable[int]) -> "DataSet":
        keep = set(episodes)
        return DataSet([tr for tr in self.transitions if tr.ep in keep], dict(self.meta))

    def arrays(self) -> dict:
        """Stacked numpy views: ``s, a, r, c, s_next, t, ep``."""
        n, ds = self.n_agents, self.state_dim
        if not self.transitions:
            return {
                "s": np.zeros((0, n * ds)), "a": np.zeros((0, n)), "r": np.zeros(0), "c": np.zeros(0),
                "s_next": np.zeros((0, n * ds)), "t": np.zeros(0, int), "ep": np.zeros(0, int),
            }
        return {
            "s": np.stack([tr.s for tr in self.transitions]),
            "a": np.stack([tr.a for tr in self.transitions]),
            "r": np.array([tr.r for tr in self.transitions]),
            "c": np.array([tr.c for tr in self.transitions]),
            "s_next": np.stack([tr.s_next for tr in self.transitions]),
            "t": np.array([tr.t for tr in self.transitions]),
            "ep": np.array([tr.ep for tr in self.transitions]),
        }

    def model_xy(self) -> tuple[np.ndarray, np.ndarray]:
        """Environment-model design matrices: ``X = [s | a]``, ``y = [s_next | r]``."""
        arr = self.arrays()
        return np.hstack([arr["s"], arr["a"]]), np.hstack([arr["s_next"], arr["r"][:, None]])


def episode_seed(seed: int, episode: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(episode)]).generate_state(1)[0])


def collect_real_data(
    cfg: SimConfig,
    behaviors: Sequence[BehaviorParams],
    episodes: int,
    seed: int,
    background: Sequence[BehaviorParams] | None = None,
    description: str = "behavior-policy rollouts in the auction simulator",
) -> DataSet:
    """Roll out the representative's behavior policies in the ground-truth system.

    Each episode draws one entry of ``behaviors`` for the representative;
    background advertisers use ``background`` (default: mean 1, noise 0.1).
    Full global transitions are stored.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    if not behaviors:
        raise ValueError("need at least one behavior policy")
    background = list(background) if background is not None else default_background(cfg)
    pick_rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5EED]))
    transitions = []
    seeds = []
    choices = []
    for e in range(episodes):
        b = int(pick_rng.integers(len(behaviors)))
        es = episode_seed(seed, e)
        seeds.append(es)
        choices.append(b)
        ep = run_episode(behavior_as_policy(behaviors[b], cfg.w_max), background, cfg, es)
        for st in ep.steps:
            transitions.append(
                Transition(
                    s=st.state, a=st.action, r=float(st.rewards[-1]), c=float(st.costs[-1]),
                    s_next=st.next_state, kind="real", ep=e, t=st.t,
                )
            )
    meta = {
        "N": cfg.n_advertisers,
        "ds": STATE_DIM,
        "T": cfg.horizon,
        "seed": int(seed),
        "generator": description,
        "sim": asdict(cfg),
        "background": [asdict(b) for b in background],
        "behaviors": [asdict(b) for b in behaviors],
        "behavior_choice": choices,
        "episode_seeds": seeds,
    }
    return DataSet(transitions, meta)


def default_background(cfg: SimConfig) -> list:
    return [BehaviorParams(mean=1.0, noise=0.1) for _ in range(cfg.n_advertisers - 1)]


# -- JSON lines ------------------------------------------------------------


def _floats(a) -> list:
    return [float(v) for v in np.asarray(a).reshape(-1)]


def write_jsonl(ds: DataSet, path: str | os.PathLike) -> None:
    """Line 1 is the meta object; each further line one transition.

    Floats are written with Python's shortest round-trip repr (up to 17
    significant digits), so reading back restores them bit for bit.
    """
    meta = dict(ds.meta)
    meta["n_transitions"] = len(ds.transitions)
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(meta, sort_keys=True) + "\n")
        for tr in ds.transitions:
            rec = {
                "s": _floats(tr.s), "a": _floats(tr.a), "r": float(tr.r), "c": float(tr.c),
                "s_next": _floats(tr.s_next), "kind": tr.kind, "ep": int(tr.ep), "t": int(tr.t),
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    os.replace(tmp, path)


_REQUIRED = ("s", "a", "r", "c", "s_next", "kind", "ep", "t")


def read_jsonl(path: str | os.PathLike) -> DataSet:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise SchemaError(f"{path}: empty file, expected a meta header line")
    try:
        meta = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}:1: malformed meta header: {exc}") from exc
    if not isinstance(meta, dict) or "N" not in meta:
        raise SchemaError(f"{path}:1: meta header must be an object with key 'N'")
    expected = meta.pop("n_transitions", None)
    transitions = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}:{lineno}: malformed transition: {exc}") from exc
        missing = [k for k in _REQUIRED if k not in rec]
        if missing:
            raise SchemaError(f"{path}:{lineno}: missing keys {missing}")
        transitions.append(
            Transition(
                s=np.array(rec["s"], dtype=np.float64), a=np.array(rec["a"], dtype=np.float64),
                r=float(rec["r"]), c=float(rec["c"]), s_next=np.array(rec["s_next"], dtype=np.float64),
                kind=rec["kind"], ep=int(rec["ep"]), t=int(rec["t"]),
            )
        )
    if expected is not None and expected != len(transitions):
        raise SchemaError(f"{path}: header declares {expected} transitions, found {len(transitions)} (truncated?)")
    try:
        return DataSet(transitions, meta)
    except SchemaError as exc:
        raise SchemaError(f"{path}: {exc}") from exc


# -- splits ----------------------------------------------------------------


def split(ds: DataSet, test_fraction: float, seed: int) -> tuple[DataSet, DataSet]:
    """Episode-level train/test split (an episode never straddles both sides)."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie strictly between 0 and 1")
    eps = ds.episode_ids()
    n_test = int(round(test_fraction * len(eps)))
    if n_test == 0 or n_test == len(eps):
        raise ValueError(f"fraction {test_fraction} leaves one side empty with {len(eps)} episode(s)")
    order = np.random.default_rng(seed).permutation(len(eps))
    test_eps = {eps[i] for i in order[:n_test]}
    train_eps = [e for e in eps if e not in test_eps]
    return ds.subset(train_eps), ds.subset(test_eps)


# -- trajectory distance ---------------------------------------------------


def wasserstein_1d(a: np.ndarray, b: np.ndarray) -> float:
    """W1 between two empirical 1-D distributions via their quantile functions."""
    a = np.sort(np.asarray(a, dtype=np.float64))
    b = np.sort(np.asarray(b, dtype=np.float64))
    if a.size == b.size:
        return float(np.mean(np.abs(a - b)))
    # piecewise-constant quantile functions; integrate |Fa^-1 - Fb^-1| over merged breakpoints
    ua = np.arange(1, a.size + 1) / a.size
    ub = np.arange(1, b.size + 1) / b.size
    knots = np.union1d(ua, ub)
    widths = np.diff(np.concatenate([[0.0], knots]))
    mids = knots - widths / 2.0
    qa = a[np.minimum(np.searchsorted(ua, mids, side="left"), a.size - 1)]
    qb = b[np.minimum(np.searchsorted(ub, mids, side="left"), b.size - 1)]
    return float(np.sum(widths * np.abs(qa - qb)))


def random_directions(dim: int, n: int, seed: int) -> np.ndarray:
    d = np.random.default_rng(seed).standard_normal((n, dim))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def sliced_wasserstein(A, B, n_projections: int = 128, seed: int = 0) -> float:
    """Mean 1-D Wasserstein-1 distance over random unit projections."""
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    if A.shape[0] == 0 or B.shape[0] == 0:
        raise ValueError("both point sets must be non-empty")
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    dirs = random_directions(A.shape[1], n_projections, seed)
    pa, pb = A @ dirs.T, B @ dirs.T
    return float(np.mean([wasserstein_1d(pa[:, k], pb[:, k]) for k in range(n_projections)]))
