from __future__ import annotations

from typing import Iterator, Mapping

import numpy as np

from .tensor import Tensor


class ParamSet(Mapping):
    """Named trainable tensors plus their Adam moments.

    Iteration order is the sorted parameter names, which keeps checkpoints
    and optimizer updates deterministic.
    """

    def __init__(self, arrays: Mapping[str, np.ndarray] | None = None):
        self._tensors: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step_count = 0
        for name in sorted(arrays or {}):
            self.add(name, arrays[name])

    def add(self, name: str, value) -> Tensor:
        if name in self._tensors:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._tensors[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        self._tensors = dict(sorted(self._tensors.items()))
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in self._tensors.items()}

    def n_params(self) -> int:
        return int(sum(t.data.size for t in self._tensors.values()))

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._tensors.items()}

    def copy(self) -> "ParamSet":
        out = ParamSet(self.arrays())
        out.m = {k: v.copy() for k, v in self.m.items()}
        out.v = {k: v.copy() for k, v in self.v.items()}
        out.step_count = self.step_count
        return out

    def load_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        for k, t in self._tensors.items():
            if arrays[k].shape != t.data.shape:
                raise ValueError(f"shape mismatch for {k}: {arrays[k].shape} vs {t.data.shape}")
            t.data = np.array(arrays[k], dtype=np.float64)

    def polyak_from(self, source: "ParamSet", tau: float) -> None:
        """``self <- tau * source + (1 - tau) * self``."""
        for k, t in self._tensors.items():
            t.data = tau * source[k].data + (1.0 - tau) * t.data


def adam_step(
    params: ParamSet,
    grads: Mapping[str, np.ndarray] | None,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, in place. ``grads=None`` reads ``.grad``."""
    if grads is None:
        grads = params.grads()
    if set(grads) != set(params):
        raise KeyError(f"gradient names do not match parameters: {sorted(set(grads) ^ set(params))}")
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise FloatingPointError(f"non-finite gradient in {bad} at optimizer step {params.step_count + 1}")
    params.step_count += 1
    t = params.step_count
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for k in params:
        g = np.asarray(grads[k], dtype=np.float64)
        if g.shape != params[k].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[k].shape} for {k}")
        params.m[k] = beta1 * params.m[k] + (1.0 - beta1) * g
        params.v[k] = beta2 * params.v[k] + (1.0 - beta2) * g * g
        params[k].data = params[k].data - lr * (params.m[k] / c1) / (np.sqrt(params.v[k] / c2) + eps)
