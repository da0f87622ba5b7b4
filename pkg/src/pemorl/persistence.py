"""Saving and restoring fitted ensembles and policies as parameter checkpoints.

Architectures are rebuilt from the run configuration; the checkpoint holds
only arrays (network weights, standardization statistics, a few sizes).
"""

from __future__ import annotations

import os

import numpy as np

from .auction_env import STATE_DIM
from .config import RunConfig
from .diffcore import ParamSet
from .diffcore.checkpoint import dumps, loads
from .env_model import EnsembleEnvironmentModel, _Scaler
from .offline_rl import ObsScaler, Policy
from .trainer import pe_estimator


class CheckpointError(ValueError):
    """Checkpoint missing pieces or built for a different architecture."""


def _write(path, arrays: dict) -> str:
    with open(path, "wb") as fh:
        fh.write(dumps(arrays))
    return str(path)


def _read(path) -> dict:
    if not os.path.exists(path):
        raise FileNotFoundError(f"{path} not found")
    with open(path, "rb") as fh:
        blob = fh.read()
    try:
        return loads(blob)
    except ValueError as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc


def save_ensemble(ens: EnsembleEnvironmentModel, path) -> str:
    arrays = {"meta.n_members": np.array(len(ens.members_), dtype=float), "meta.n_agents": np.array(ens.n_agents_, dtype=float)}
    for k, m in enumerate(ens.members_):
        arrays.update({f"m{k}.param.{name}": a for name, a in m.params_.arrays().items()})
        arrays.update({f"m{k}.scaler.{name}": np.asarray(v, dtype=float) for name, v in m.scaler_.to_dict().items()})
    return _write(path, arrays)


def load_ensemble(path, cfg: RunConfig) -> EnsembleEnvironmentModel:
    arrays = _read(path)
    if "meta.n_members" not in arrays:
        raise CheckpointError(f"{path}: not an ensemble checkpoint")
    n_members = int(arrays["meta.n_members"])
    n_agents = int(arrays["meta.n_agents"])
    members = []
    for k in range(n_members):
        m = pe_estimator(cfg.model, STATE_DIM)
        params = {n[len(f"m{k}.param."):]: a for n, a in arrays.items() if n.startswith(f"m{k}.param.")}
        template = m._init_params(np.random.default_rng(0), n_agents, STATE_DIM)
        if set(template) != set(params) or any(template[n].shape != params[n].shape for n in template):
            raise CheckpointError(f"{path}: member {k} does not match the configured architecture")
        scaler = _Scaler()
        for n, a in arrays.items():
            if n.startswith(f"m{k}.scaler."):
                setattr(scaler, n[len(f"m{k}.scaler."):], a if a.ndim else float(a))
        m.params_, m.scaler_, m.n_agents_ = ParamSet(params), scaler, n_agents
        members.append(m)
    return EnsembleEnvironmentModel.from_members(members)


def save_policy(policy: Policy, path) -> str:
    arrays = dict(policy.params.arrays())
    arrays["scaler.mean"] = policy.scaler.mean
    arrays["scaler.scale"] = policy.scaler.scale
    arrays["meta.w_max"] = np.array(policy.w_max)
    return _write(path, arrays)


def load_policy(path, cfg: RunConfig) -> Policy:
    arrays = _read(path)
    if "meta.w_max" not in arrays:
        raise CheckpointError(f"{path}: not a policy checkpoint")
    scaler = ObsScaler(arrays.pop("scaler.mean"), arrays.pop("scaler.scale"))
    w_max = float(arrays.pop("meta.w_max"))
    pol = Policy(STATE_DIM, cfg.learner.hidden, w_max, scaler)
    template = pol.params.arrays()
    if set(arrays) != set(template) or any(arrays[n].shape != template[n].shape for n in template):
        raise CheckpointError(f"{path}: policy parameters do not match the configured architecture")
    pol.params.load_arrays(arrays)
    return pol
