from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .optim import ParamSet
from .tensor import Tensor


@dataclass
class GradCheckReport:
    n_checked: int
    max_rel_error: float
    frac_within_tol: float
    tol: float
    hard_limit: float
    passed: bool
    errors: list = field(default_factory=list, repr=False)


def _rel_error(a: float, n: float, floor: float = 1e-6) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: ParamSet,
    h: float = 1e-5,
    tol: float = 1e-3,
    n_coords: int = 60,
    hard_limit: float = 1e-2,
    min_frac: float = 0.95,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``loss_fn`` rebuilds the scalar loss from the current parameter values.
    Coordinates are sampled uniformly over all parameters. Passes when at
    least ``min_frac`` of them have relative error within ``tol`` and none
    exceeds ``hard_limit``.
    """
    rng = np.random.default_rng(seed)
    params.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = params.grads()

    coords = [(k, i) for k in params for i in range(params[k].data.size)]
    pick = rng.choice(len(coords), size=min(n_coords, len(coords)), replace=False)
    errors = []
    for c in sorted(pick):
        name, flat = coords[c]
        arr = params[name].data.reshape(-1)
        orig = arr[flat]
        arr[flat] = orig + h
        up = loss_fn().item()
        arr[flat] = orig - h
        down = loss_fn().item()
        arr[flat] = orig
        numeric = (up - down) / (2.0 * h)
        errors.append(_rel_error(float(analytic[name].reshape(-1)[flat]), numeric))
    errors_arr = np.array(errors)
    frac = float(np.mean(errors_arr <= tol)) if errors else 1.0
    worst = float(errors_arr.max()) if errors else 0.0
    return GradCheckReport(
        n_checked=len(errors),
        max_rel_error=worst,
        frac_within_tol=frac,
        tol=tol,
        hard_limit=hard_limit,
        passed=frac >= min_frac and worst <= hard_limit,
        errors=errors,
    )
