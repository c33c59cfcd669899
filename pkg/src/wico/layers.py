"""Small differentiable building blocks on top of :mod:`wico.tensor`.

Parameters live in flat ``dict[str, Tensor]`` maps keyed by dotted names; the
helpers here read from such a map given a prefix.
"""

from __future__ import annotations

import math
from typing import Mapping

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .tensor import Tensor

Params = Mapping[str, Tensor]


def init_linear(rng: np.random.Generator, fan_in: int, fan_out: int, prefix: str,
                zero: bool = False) -> dict[str, Tensor]:
    """Glorot-uniform weight of shape (fan_in, fan_out) and a zero bias."""
    if zero:
        w = np.zeros((fan_in, fan_out))
    else:
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    return {f"{prefix}.w": Tensor(w, requires_grad=True),
            f"{prefix}.b": Tensor(np.zeros(fan_out), requires_grad=True)}


def linear(x: Tensor, params: Params, prefix: str) -> Tensor:
    w = params[f"{prefix}.w"]
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"{prefix}: input width {x.shape[-1]} != {w.shape[0]}")
    return T.matmul(x, w) + params[f"{prefix}.b"]


def init_mlp(rng: np.random.Generator, widths: list[int], prefix: str,
             zero_last: bool = False) -> dict[str, Tensor]:
    out: dict[str, Tensor] = {}
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        last = i == len(widths) - 2
        out.update(init_linear(rng, a, b, f"{prefix}.{i}", zero=zero_last and last))
    return out


def mlp(x: Tensor, params: Params, prefix: str, depth: int = 3) -> Tensor:
    """``depth`` affine layers with ReLU between them (none after the last)."""
    for i in range(depth):
        x = linear(x, params, f"{prefix}.{i}")
        if i < depth - 1:
            x = T.relu(x)
    return x


def init_layer_norm(width: int, prefix: str) -> dict[str, Tensor]:
    return {f"{prefix}.g": Tensor(np.ones(width), requires_grad=True),
            f"{prefix}.b": Tensor(np.zeros(width), requires_grad=True)}


def layer_norm(x: Tensor, params: Params, prefix: str) -> Tensor:
    return T.layer_norm(x, params[f"{prefix}.g"], params[f"{prefix}.b"])


def init_attention(rng: np.random.Generator, width: int, prefix: str) -> dict[str, Tensor]:
    out: dict[str, Tensor] = {}
    for name in ("q", "k", "v", "o"):
        out.update(init_linear(rng, width, width, f"{prefix}.{name}"))
    return out


def multi_head_attention(query: Tensor, key: Tensor, value: Tensor, params: Params,
                         prefix: str, num_heads: int) -> tuple[Tensor, np.ndarray]:
    """Scaled dot-product attention; returns the output and weights (heads, n_q, n_k)."""
    n, c = query.shape
    m = key.shape[0]
    if c % num_heads:
        raise DimensionError(f"width {c} not divisible by {num_heads} heads")
    d = c // num_heads
    q = linear(query, params, f"{prefix}.q").reshape(n, num_heads, d).transpose(1, 0, 2)
    k = linear(key, params, f"{prefix}.k").reshape(m, num_heads, d).transpose(1, 2, 0)
    v = linear(value, params, f"{prefix}.v").reshape(m, num_heads, d).transpose(1, 0, 2)
    weights = T.softmax(T.matmul(q, k) * (1.0 / math.sqrt(d)), axis=-1)
    mixed = T.matmul(weights, v).transpose(1, 0, 2).reshape(n, c)
    return linear(mixed, params, f"{prefix}.o"), weights.data
