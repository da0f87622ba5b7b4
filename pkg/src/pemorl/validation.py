"""Input checks shared by the estimators."""

from __future__ import annotations

import numbers

import numpy as np
from sklearn.utils.validation import check_array


def check_random_state_int(seed) -> int:
    """Normalize a seed to a plain non-negative int (``None`` means 0)."""
    if seed is None:
        return 0
    if isinstance(seed, numbers.Integral) and seed >= 0:
        return int(seed)
    raise ValueError(f"random_state must be a non-negative int or None, got {seed!r}")


def check_model_input(X, y, state_dim: int, n_agents: int | None = None):
    """Validate ``X = [s | a]`` (and ``y = [s' | r]`` when given).

    Column counts must be consistent with ``state_dim`` and, when known,
    the fitted advertiser count.
    """
    X = check_array(X, dtype=np.float64, ensure_all_finite=True)
    width = X.shape[1]
    if width % (state_dim + 1):
        raise ValueError(f"X has {width} columns, not a multiple of state_dim + 1 = {state_dim + 1}")
    n = width // (state_dim + 1)
    if n_agents is not None and n != n_agents:
        raise ValueError(f"X encodes {n} advertisers but the model was fitted on {n_agents}")
    if y is None:
        return X
    y = check_array(y, dtype=np.float64, ensure_all_finite=True)
    if y.shape != (X.shape[0], n * state_dim + 1):
        raise ValueError(f"y must have shape {(X.shape[0], n * state_dim + 1)}, got {y.shape}")
    return X, y
