"""Network building blocks on top of :mod:`pemorl.diffcore.tensor`."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor

ACTIVATIONS = {
    "linear": lambda x: x,
    "relu": T.relu,
    "tanh": T.tanh,
    "softplus": T.softplus,
}


def dense(x, weights: Tensor, bias: Tensor | None = None, activation: str = "linear") -> Tensor:
    """``act(x @ W + b)`` over the last axis of ``x``."""
    x = T.as_tensor(x)
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    if x.shape[-1] != weights.shape[0]:
        raise ValueError(f"dense: input width {x.shape[-1]} does not match weights {weights.shape}")
    out = T.matmul(x, weights)
    if bias is not None:
        out = out + bias
    return ACTIVATIONS[activation](out)


def mlp(x, params, prefix: str, n_layers: int, hidden_act: str = "relu", out_act: str = "linear") -> Tensor:
    """Stack of ``n_layers`` dense layers named ``{prefix}{k}.w`` / ``{prefix}{k}.b``."""
    for k in range(n_layers):
        act = out_act if k == n_layers - 1 else hidden_act
        x = dense(x, params[f"{prefix}{k}.w"], params[f"{prefix}{k}.b"], act)
    return x


def multi_head_attention(x, n_heads: int, params, prefix: str = "att.") -> Tensor:
    """Scaled dot-product self-attention over the second-to-last axis.

    ``x`` has shape ``(..., E, D)``: a set of ``E`` elements of width ``D``
    per leading index. No positional encoding is used, so the map is
    permutation equivariant in the set axis. The concatenated heads go
    through the cross-head dense layer ``{prefix}o``.
    """
    x = T.as_tensor(x)
    d = x.shape[-1]
    if d % n_heads:
        raise ValueError(f"embedding width {d} not divisible by {n_heads} heads")
    dh = d // n_heads
    lead = x.shape[:-2]
    e = x.shape[-2]

    def heads(name):
        h = dense(x, params[f"{prefix}{name}.w"], params[f"{prefix}{name}.b"])
        h = h.reshape(lead + (e, n_heads, dh))
        nl = len(lead)
        return h.transpose(tuple(range(nl)) + (nl + 1, nl, nl + 2))

    q, k, v = heads("q"), heads("k"), heads("v")
    nl = len(lead)
    kt = k.transpose(tuple(range(nl + 1)) + (nl + 2, nl + 1))
    scores = T.matmul(q, kt) * (1.0 / np.sqrt(dh))
    attn = T.softmax(scores, axis=-1)
    ctx = T.matmul(attn, v)
    ctx = ctx.transpose(tuple(range(nl)) + (nl + 1, nl, nl + 2)).reshape(lead + (e, d))
    return dense(ctx, params[f"{prefix}o.w"], params[f"{prefix}o.b"])


def encoder_block(x, n_heads: int, params, prefix: str) -> Tensor:
    """Residual attention followed by a residual position-wise feed-forward layer."""
    x = x + multi_head_attention(x, n_heads, params, prefix + "att.")
    h = dense(x, params[prefix + "ff0.w"], params[prefix + "ff0.b"], "relu")
    return x + dense(h, params[prefix + "ff1.w"], params[prefix + "ff1.b"])


def pool_mean_max(x, axis: int = -2) -> Tensor:
    """Concatenate the elementwise mean and max over the set axis."""
    x = T.as_tensor(x)
    if x.shape[axis] == 0:
        raise ValueError("pool_mean_max over an empty set")
    return T.concat([T.tmean(x, axis=axis), T.tmax(x, axis=axis)], axis=-1)


# -- initialisation --------------------------------------------------------


def init_dense(rng: np.random.Generator, fan_in: int, fan_out: int, scale: float = 1.0):
    """Glorot-uniform weights, zero bias."""
    lim = scale * np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out)), np.zeros(fan_out)


def init_mlp(rng, sizes, prefix: str, out_scale: float = 1.0) -> dict:
    out = {}
    for k, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = k == len(sizes) - 2
        w, bias = init_dense(rng, a, b, out_scale if last else 1.0)
        out[f"{prefix}{k}.w"] = w
        out[f"{prefix}{k}.b"] = bias
    return out


def init_attention(rng, width: int, prefix: str) -> dict:
    out = {}
    for name in ("q", "k", "v", "o"):
        w, b = init_dense(rng, width, width)
        out[f"{prefix}{name}.w"] = w
        out[f"{prefix}{name}.b"] = b
    return out


def init_encoder(rng, width: int, ff_width: int, prefix: str) -> dict:
    out = init_attention(rng, width, prefix + "att.")
    w0, b0 = init_dense(rng, width, ff_width)
    w1, b1 = init_dense(rng, ff_width, width)
    out.update({prefix + "ff0.w": w0, prefix + "ff0.b": b0, prefix + "ff1.w": w1, prefix + "ff1.b": b1})
    return out
