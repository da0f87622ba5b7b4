"""Permutation-equivariant Gaussian environment models and their ensembles.

Inputs follow the flattened transition layout used by :mod:`pemorl.dataset`:
``X = [s_1 .. s_N | a_1 .. a_N]`` with ``s_i`` of width ``state_dim`` and
``y = [s'_1 .. s'_N | r]``. The next-state part is PE in the advertiser
order, the reward PI.

Internally every advertiser is the record ``z_i = (s_i, a_i, e_i)`` where
``e_i`` flags the representative advertiser, whose reward is predicted. The
flag travels with its record under permutation, just as advertiser ids do in
the simulator, so the reward head can tell the representative apart while
staying permutation invariant. Next states are learned as standardized
deltas with per-feature statistics pooled over advertisers, so the scaling
itself commutes with permutations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, clone
from sklearn.utils.validation import check_is_fitted

from .diffcore import ParamSet, adam_step, no_grad
from .diffcore import layers as L
from .diffcore import tensor as T
from .diffcore.tensor import Tensor
from .validation import check_model_input, check_random_state_int

MIN_VAR = 1e-3  # variance floor in standardized units


@dataclass
class GaussianPrediction:
    mean: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        if not (np.all(np.isfinite(self.mean)) and np.all(np.isfinite(self.variance))):
            raise ValueError("prediction contains non-finite values")
        if np.any(self.variance <= 0):
            raise ValueError("variances must be positive")


def nll_loss(mean, var, target) -> Tensor:
    """Diagonal Gaussian loss ``sum (t-mu)^2/var + sum log var + ||diag(var)||_F``.

    Accepts single vectors or ``(batch, d)`` arrays (averaged over the batch).
    """
    mean, var, target = T.as_tensor(mean), T.as_tensor(var), T.as_tensor(target)
    if mean.shape != var.shape or mean.shape != target.shape:
        raise ValueError(f"shape mismatch: mean {mean.shape}, var {var.shape}, target {target.shape}")
    if np.any(var.data <= 0):
        raise ValueError("nll_loss needs strictly positive variances")
    resid = target - mean
    per = T.tsum(T.square(resid) / var + T.log(var), axis=-1) + T.sqrt(T.tsum(T.square(var), axis=-1))
    return T.tmean(per) if per.ndim else per


def nll_loss_full(mean, cov, target) -> Tensor:
    """Full-covariance variant ``r^T S^-1 r + log|S| + ||S||_F`` for ``(batch, d, d)`` covariances."""
    mean, cov, target = T.as_tensor(mean), T.as_tensor(cov), T.as_tensor(target)
    resid = target - mean
    quad_logdet = _quad_logdet(resid, cov)
    frob = T.sqrt(T.tsum(T.square(cov), axis=(-2, -1)))
    return T.tmean(quad_logdet + frob)


def _quad_logdet(resid: Tensor, cov: Tensor) -> Tensor:
    """``r^T S^-1 r + log det S`` per batch row, with S symmetric positive definite."""
    S = cov.data
    inv = np.linalg.inv(S)
    sol = np.einsum("bij,bj->bi", inv, resid.data)
    quad = np.einsum("bi,bi->b", resid.data, sol)
    _, logdet = np.linalg.slogdet(S)

    def bw(g):
        gr = 2.0 * g[:, None] * sol
        gS = g[:, None, None] * (inv - sol[:, :, None] * sol[:, None, :])
        return ((resid, gr), (cov, gS))

    return T.make_op(quad + logdet, (resid, cov), bw)


def symmetrize_clip(rows: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """``(S + S^T) / 2`` with eigenvalues clipped at ``floor`` (batched)."""
    S = 0.5 * (rows + np.swapaxes(rows, -1, -2))
    w, U = np.linalg.eigh(S)
    return (U * np.maximum(w, floor)[..., None, :]) @ np.swapaxes(U, -1, -2)


def _clip_psd(cov: Tensor, floor: float = 1e-6) -> Tensor:
    # straight-through: forward clips eigenvalues, backward treats it as identity
    return T.make_op(symmetrize_clip(cov.data, floor), (cov,), lambda g: ((cov, g),))


def rep_flag(n: int) -> np.ndarray:
    """Indicator of the representative advertiser (last position)."""
    flag = np.zeros(n)
    flag[-1] = 1.0
    return flag


def others_index(n: int) -> np.ndarray:
    """``(n, n-1)`` indices of every advertiser except the row's own."""
    return np.array([[j for j in range(n) if j != i] for i in range(n)], dtype=np.intp)


class _Scaler:
    """Shared-per-feature standardization that commutes with advertiser permutations."""

    def fit(self, S, A, S_next, R, n, ds):
        s = S.reshape(-1, n, ds)
        d = S_next.reshape(-1, n, ds) - s
        self.s_mu, self.s_sd = s.reshape(-1, ds).mean(0), _sd(s.reshape(-1, ds))
        self.a_mu, self.a_sd = A.reshape(-1).mean(), _sd(A.reshape(-1, 1))[0]
        self.d_mu, self.d_sd = d.reshape(-1, ds).mean(0), _sd(d.reshape(-1, ds))
        self.r_mu, self.r_sd = R.mean(), _sd(R.reshape(-1, 1))[0]
        return self

    def inputs(self, S, A, n, ds):
        """Records ``(B, n, ds + 2)``: standardized state, action, representative flag."""
        s = (S.reshape(-1, n, ds) - self.s_mu) / self.s_sd
        a = ((A - self.a_mu) / self.a_sd)[..., None]
        return np.concatenate([s, a, np.broadcast_to(rep_flag(n)[:, None], a.shape)], axis=-1)

    def targets(self, S, S_next, R, n, ds):
        d = (S_next.reshape(-1, n, ds) - S.reshape(-1, n, ds) - self.d_mu) / self.d_sd
        r = (R - self.r_mu) / self.r_sd
        return np.concatenate([d.reshape(len(R), -1), r[:, None]], axis=1)

    def output_scale(self, n):
        return np.concatenate([np.tile(self.d_sd, n), [self.r_sd]])

    def decode(self, S, mean, var, n, ds):
        scale = self.output_scale(n)
        shift = np.concatenate([np.tile(self.d_mu, n), [self.r_mu]])
        base = np.concatenate([S, np.zeros((len(S), 1))], axis=1)
        return base + shift + mean * scale, var * scale**2

    def to_dict(self):
        return {k: np.asarray(v, dtype=np.float64) for k, v in vars(self).items()}


def _sd(x):
    return np.maximum(x.std(axis=0), 1e-3)


class _GaussianModelBase(RegressorMixin, BaseEstimator):
    """Shared fitting loop: minibatch Adam on the Gaussian NLL, keep best validation loss."""

    def _init_params(self, rng, n, ds):
        raise NotImplementedError

    def _forward(self, params, z, n, ds):
        """Return ``(mean, var)`` tensors of shape ``(B, n * ds + 1)`` in standardized units."""
        raise NotImplementedError

    def _loss(self, params, z, target, n, ds):
        mean, var = self._forward(params, z, n, ds)
        return nll_loss(mean, var, target)

    def _split_xy(self, X, ds):
        n = X.shape[1] // (ds + 1)
        return X[:, : n * ds], X[:, n * ds :], n

    def fit(self, X, y):
        ds = self.state_dim
        X, y = check_model_input(X, y, ds)
        S, A, n = self._split_xy(X, ds)
        if n < 2:
            raise ValueError("environment models need at least two advertisers")
        seed = check_random_state_int(self.random_state)
        rng = np.random.default_rng(seed)
        self.scaler_ = _Scaler().fit(S, A, y[:, :-1], y[:, -1], n, ds)
        Z = self.scaler_.inputs(S, A, n, ds)
        Y = self.scaler_.targets(S, y[:, :-1], y[:, -1], n, ds)
        self.n_agents_ = n
        self.params_ = ParamSet(self._init_params(rng, n, ds))

        order = rng.permutation(len(X))
        n_val = int(round(self.val_fraction * len(X))) if len(X) >= 10 else 0
        val, tr = order[:n_val], order[n_val:]
        if len(tr) == 0:
            raise ValueError("no training rows left after the validation split")

        def eval_loss(idx):
            with no_grad():
                return self._loss(self.params_, Z[idx], Y[idx], n, ds).item()

        init_loss = eval_loss(tr)
        best = (eval_loss(val) if n_val else init_loss, self.params_.arrays())
        self.curve_ = [{"epoch": 0, "train": init_loss, "val": best[0]}]
        for epoch in range(1, self.epochs + 1):
            perm = rng.permutation(tr)
            losses = []
            for start in range(0, len(perm), self.batch_size):
                idx = perm[start : start + self.batch_size]
                self.params_.zero_grad()
                loss = self._loss(self.params_, Z[idx], Y[idx], n, ds)
                if not np.isfinite(loss.data):
                    raise FloatingPointError(f"model loss diverged at epoch {epoch}: {loss.item()}")
                loss.backward()
                adam_step(self.params_, None, self.lr)
                losses.append(loss.item())
            val_loss = eval_loss(val) if n_val else float(np.mean(losses))
            self.curve_.append({"epoch": epoch, "train": float(np.mean(losses)), "val": val_loss})
            if val_loss < best[0]:
                best = (val_loss, self.params_.arrays())
        self.params_.load_arrays(best[1])
        self.best_val_loss_ = best[0]
        self.train_loss_init_ = init_loss
        self.train_loss_final_ = eval_loss(tr)
        return self

    def predict_dist(self, X) -> tuple[np.ndarray, np.ndarray]:
        """Mean and per-dimension variance of ``[s' | r]`` in data units."""
        check_is_fitted(self, "params_")
        ds = self.state_dim
        X = check_model_input(X, None, ds, n_agents=self.n_agents_)
        S, A, n = self._split_xy(X, ds)
        z = self.scaler_.inputs(S, A, n, ds)
        with no_grad():
            mean, var = self._forward(self.params_, z, n, ds)
        return self.scaler_.decode(S, mean.data, var.data, n, ds)

    def predict(self, X) -> np.ndarray:
        return self.predict_dist(X)[0]

    def predict_gaussian(self, x) -> GaussianPrediction:
        mean, var = self.predict_dist(np.atleast_2d(x))
        return GaussianPrediction(mean[0], var[0])

    def n_params(self) -> int:
        check_is_fitted(self, "params_")
        return self.params_.n_params()

    def param_count(self, n_agents: int) -> int:
        """Parameter count for ``n_agents`` advertisers, without fitting."""
        params = self._init_params(np.random.default_rng(0), n_agents, self.state_dim)
        return int(sum(np.size(v) for v in params.values()))


class PEEnvironmentModel(_GaussianModelBase):
    """Permutation-equivariant next-state / permutation-invariant reward model.

    Every advertiser is handled by one shared block: a dense embedding of its
    own ``(s_i, a_i)``, and an attention encoder over the other advertisers
    pooled by mean and max, merged by a dense head that emits the mean and
    variance of ``s'_i``. A separate attention encoder over all advertisers,
    pooled the same way, predicts the reward.

    Parameters
    ----------
    state_dim : int
        Width of one advertiser's local state.
    embed_dim, n_heads, hidden, n_encoders : int
        Attention width, head count, dense width and encoder depth.
    layer_norm : bool
        Normalize after each residual connection in the encoders.
    covariance : {"diag", "full"}
        ``"full"`` emits covariance rows that are symmetrized and
        eigenvalue-clipped; inspection only.
    """

    def __init__(
        self,
        state_dim: int = 6,
        embed_dim: int = 32,
        n_heads: int = 4,
        hidden: int = 64,
        n_encoders: int = 1,
        layer_norm: bool = False,
        covariance: str = "diag",
        epochs: int = 50,
        batch_size: int = 256,
        lr: float = 1e-3,
        val_fraction: float = 0.1,
        random_state: int | None = 0,
    ):
        self.state_dim = state_dim
        self.embed_dim = embed_dim
        self.n_heads = n_heads
        self.hidden = hidden
        self.n_encoders = n_encoders
        self.layer_norm = layer_norm
        self.covariance = covariance
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.val_fraction = val_fraction
        self.random_state = random_state

    def _out_widths(self, n, ds):
        d = n * ds + 1
        if self.covariance == "full":
            return ds + ds * d, 1 + d
        if self.covariance != "diag":
            raise ValueError(f"covariance must be 'diag' or 'full', got {self.covariance!r}")
        return 2 * ds, 2

    def _init_params(self, rng, n, ds):
        if self.embed_dim % self.n_heads:
            raise ValueError(f"embed_dim={self.embed_dim} is not divisible by n_heads={self.n_heads}")
        E, H, F = self.embed_dim, self.hidden, ds + 2
        out_block, out_reward = self._out_widths(n, ds)
        p = {}
        p.update(L.init_mlp(rng, [F, H, E], "fc1."))
        for side in ("psiL.", "psiR."):
            w, b = L.init_dense(rng, F, E)
            p[side + "in.w"], p[side + "in.b"] = w, b
            for k in range(self.n_encoders):
                p.update(L.init_encoder(rng, E, 2 * E, f"{side}enc{k}."))
        p.update(L.init_mlp(rng, [3 * E, H, H, out_block], "fc2.", out_scale=0.1))
        p.update(L.init_mlp(rng, [2 * E, H, out_reward], "fcr.", out_scale=0.1))
        return p

    def _encode(self, params, x, side):
        h = L.dense(x, params[side + "in.w"], params[side + "in.b"])
        for k in range(self.n_encoders):
            h = L.encoder_block(h, self.n_heads, params, f"{side}enc{k}.")
            if self.layer_norm:
                h = _layer_norm(h)
        return L.pool_mean_max(h, axis=-2)

    def _heads(self, params, z, n):
        z = T.as_tensor(z)
        own = L.mlp(z, params, "fc1.", 2)
        others = T.getitem(z, (slice(None), others_index(n)))  # (B, n, n-1, F)
        pooled = self._encode(params, others, "psiL.")
        block_out = L.mlp(T.concat([own, pooled], axis=-1), params, "fc2.", 3)  # (B, n, out_block)
        reward_out = L.mlp(self._encode(params, z, "psiR."), params, "fcr.", 2)  # (B, out_reward)
        return block_out, reward_out

    def _forward(self, params, z, n, ds):
        block_out, reward_out = self._heads(params, z, n)
        B = z.shape[0]
        mean = T.concat([block_out[..., :ds].reshape(B, n * ds), reward_out[:, :1]], axis=-1)
        if self.covariance == "full":
            cov = self._covariance(block_out, reward_out, n, ds)
            var = T.Tensor(np.diagonal(cov.data, axis1=-2, axis2=-1).copy())
            return mean, var
        raw = T.concat([block_out[..., ds:].reshape(B, n * ds), reward_out[:, 1:]], axis=-1)
        return mean, T.softplus(raw) + MIN_VAR

    def forward_records(self, Z, params: ParamSet | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Standardized means on raw records ``Z`` of shape ``(B, n, ds + 2)``.

        Returns next-state means ``(B, n, ds)`` and reward means ``(B,)``.
        The representative is whichever record carries flag 1, so permuting
        records (flag included) permutes the first output and leaves the
        second unchanged.
        """
        params = params if params is not None else self.params_
        Z = np.asarray(Z, dtype=np.float64)
        n, ds = Z.shape[1], self.state_dim
        with no_grad():
            block_out, reward_out = self._heads(params, Z, n)
        return block_out.data[..., :ds], reward_out.data[:, 0]

    def _covariance(self, block_out, reward_out, n, ds):
        B = block_out.shape[0]
        d = n * ds + 1
        rows = T.concat([block_out[..., ds:].reshape(B, n * ds, d), reward_out[:, 1:].reshape(B, 1, d)], axis=1)
        return _clip_psd(rows)

    def _loss(self, params, z, target, n, ds):
        if self.covariance != "full":
            return super()._loss(params, z, target, n, ds)
        block_out, reward_out = self._heads(params, z, n)
        B = z.shape[0]
        mean = T.concat([block_out[..., :ds].reshape(B, n * ds), reward_out[:, :1]], axis=-1)
        cov = self._covariance(block_out, reward_out, n, ds) + MIN_VAR * np.eye(n * ds + 1)
        return nll_loss_full(mean, cov, target)

    def predict_covariance(self, X) -> np.ndarray:
        """Full covariance of ``[s' | r]`` in data units (``covariance="full"`` only)."""
        check_is_fitted(self, "params_")
        if self.covariance != "full":
            raise ValueError("predict_covariance needs covariance='full'")
        ds = self.state_dim
        X = check_model_input(X, None, ds, n_agents=self.n_agents_)
        S, A, n = self._split_xy(X, ds)
        z = self.scaler_.inputs(S, A, n, ds)
        with no_grad():
            block_out, reward_out = self._heads(self.params_, z, n)
            cov = self._covariance(block_out, reward_out, n, ds).data
        scale = self.scaler_.output_scale(n)
        return cov * scale[:, None] * scale[None, :]

    def sample_full(self, X, rng: np.random.Generator) -> np.ndarray:
        """Reparameterized draw ``mu + L eps`` with ``L`` the Cholesky factor."""
        mean = self.predict(X)
        chol = np.linalg.cholesky(self.predict_covariance(X))
        eps = rng.standard_normal(mean.shape)
        return mean + np.einsum("bij,bj->bi", chol, eps)


def _layer_norm(h: Tensor, eps: float = 1e-5) -> Tensor:
    mu = T.tmean(h, axis=-1, keepdims=True)
    c = h - mu
    var = T.tmean(T.square(c), axis=-1, keepdims=True)
    return c / T.sqrt(var + eps)


class FCEnvironmentModel(_GaussianModelBase):
    """Dense network on the concatenated inputs; ignores advertiser symmetry.

    ``hidden=None`` picks the width whose parameter count is closest to
    ``match_params`` (two hidden layers).
    """

    def __init__(
        self,
        state_dim: int = 6,
        hidden: int | None = 128,
        match_params: int | None = None,
        epochs: int = 50,
        batch_size: int = 256,
        lr: float = 1e-3,
        val_fraction: float = 0.1,
        random_state: int | None = 0,
    ):
        self.state_dim = state_dim
        self.hidden = hidden
        self.match_params = match_params
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.val_fraction = val_fraction
        self.random_state = random_state

    @staticmethod
    def count_params(width: int, n: int, ds: int) -> int:
        i, o = n * (ds + 1), 2 * (n * ds + 1)
        return (i + 1) * width + (width + 1) * width + (width + 1) * o

    def width_for(self, n: int, ds: int) -> int:
        if self.match_params is None:
            return int(self.hidden)
        widths = np.arange(4, 2048)
        counts = np.array([self.count_params(w, n, ds) for w in widths])
        return int(widths[np.argmin(np.abs(counts - self.match_params))])

    def _init_params(self, rng, n, ds):
        W = self.width_for(n, ds)
        self.width_ = W
        return L.init_mlp(rng, [n * (ds + 1), W, W, 2 * (n * ds + 1)], "fc.", out_scale=0.1)

    def _forward(self, params, z, n, ds):
        B = z.shape[0]
        # the flag column is constant in this layout and carries nothing for a dense net
        out = L.mlp(T.as_tensor(z[..., : ds + 1].reshape(B, -1)), params, "fc.", 3)
        d = n * ds + 1
        return out[:, :d], T.softplus(out[:, d:]) + MIN_VAR


class EnsembleEnvironmentModel(BaseEstimator):
    """``n_members`` copies of ``estimator`` differing only in seed (init and shuffling)."""

    def __init__(self, estimator=None, n_members: int = 4, random_state: int | None = 0):
        self.estimator = estimator
        self.n_members = n_members
        self.random_state = random_state

    def fit(self, X, y):
        if self.n_members < 2:
            raise ValueError("an ensemble needs at least two members for uncertainty estimates")
        base = self.estimator if self.estimator is not None else PEEnvironmentModel()
        seeds = np.random.SeedSequence(check_random_state_int(self.random_state)).generate_state(self.n_members)
        self.members_ = []
        for k in range(self.n_members):
            m = clone(base).set_params(random_state=int(seeds[k]))
            self.members_.append(m.fit(X, y))
        self.member_seeds_ = [int(s) for s in seeds]
        return self

    @classmethod
    def from_members(cls, members) -> "EnsembleEnvironmentModel":
        ens = cls(estimator=clone(members[0]), n_members=len(members))
        ens.members_ = list(members)
        return ens

    @property
    def state_dim(self) -> int:
        return self.members_[0].state_dim

    @property
    def n_agents_(self) -> int:
        return self.members_[0].n_agents_

    def predict_members(self, X) -> tuple[np.ndarray, np.ndarray]:
        """``(K, n, d)`` means and variances, one slice per member."""
        check_is_fitted(self, "members_")
        outs = [m.predict_dist(X) for m in self.members_]
        return np.stack([o[0] for o in outs]), np.stack([o[1] for o in outs])

    def predict(self, X) -> np.ndarray:
        return self.predict_members(X)[0].mean(axis=0)

    def predict_dist(self, X):
        means, vars_ = self.predict_members(X)
        return means.mean(axis=0), vars_.mean(axis=0)

    def sample_members(self, X, rng: np.random.Generator, moments=None) -> np.ndarray:
        """One reparameterized draw from every member: ``(K, n, d)``."""
        means, vars_ = moments if moments is not None else self.predict_members(X)
        return means + np.sqrt(vars_) * rng.standard_normal(means.shape)

    def sample(self, X, rng: np.random.Generator, moments=None):
        """Draw ``(s', r, member)`` per row from a uniformly chosen member."""
        means, vars_ = moments if moments is not None else self.predict_members(X)
        K, n, d = means.shape
        member = rng.integers(K, size=n)
        rows = np.arange(n)
        draw = means[member, rows] + np.sqrt(vars_[member, rows]) * rng.standard_normal((n, d))
        return draw[:, :-1], draw[:, -1], member

    def reward_uncertainty(self, X, moments=None) -> np.ndarray:
        """Population standard deviation of the members' reward means."""
        means = moments[0] if moments is not None else self.predict_members(X)[0]
        r = means[:, :, -1]
        # centring on one member first makes identical members give exactly 0
        return (r - r[0]).std(axis=0)
