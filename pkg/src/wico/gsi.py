"""Gaussian scoring integration.

Each branch gets a predicted performance distribution N(mu, sigma); a score
drawn from it (reparameterised) weights that branch in the final blend.
The top-down mask is selected with a straight-through hard argmax.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from . import tensor as T
from .domain import BinaryMask, PixelEmbeddings, ProbabilityMap, argmax_first
from .errors import DimensionError, InvalidInputError
from .layers import Params, init_mlp, mlp
from .tensor import Tensor

Mode = Literal["train", "infer"]


@dataclass(frozen=True)
class PerformanceDistribution:
    mu: Tensor  # shape (), in (0, 1)
    sigma: Tensor  # shape (), >= 0

    def as_floats(self) -> tuple[float, float]:
        return float(self.mu.data), float(self.sigma.data)


@dataclass
class BlendResult:
    fused: Tensor  # (H, W)
    iou_td: Tensor
    iou_bu: Tensor
    selection: Tensor  # lambda, (n,)
    topdown: PerformanceDistribution | None = None
    bottomup: PerformanceDistribution | None = None

    @property
    def fused_map(self) -> ProbabilityMap:
        return ProbabilityMap(np.clip(self.fused.data, 0.0, 1.0))


def head_widths(channels: int, outputs: int) -> list[int]:
    return [channels, channels, max(channels // 2, 1), outputs]


def init_gsi_params(channels: int, rng: np.random.Generator) -> dict[str, Tensor]:
    params = init_mlp(rng, head_widths(channels, 2), "gsi.td")
    params.update(init_mlp(rng, head_widths(channels, 2), "gsi.bu"))
    return params


def _split(raw: Tensor) -> PerformanceDistribution:
    return PerformanceDistribution(T.sigmoid(raw[0]), T.softplus(raw[1]))


def predict_distribution_topdown(selected_embedding: Tensor, params: Params,
                                 prefix: str = "gsi.td") -> PerformanceDistribution:
    width = params[f"{prefix}.0.w"].shape[0]
    if selected_embedding.shape != (width,):
        raise DimensionError(f"embedding {selected_embedding.shape} vs head input ({width},)")
    return _split(mlp(selected_embedding.reshape(1, width), params, prefix).reshape(2))


def pool_masked_pixels(pixels: PixelEmbeddings, prob: Tensor | ProbabilityMap) -> Tensor:
    """Global average pooling of the pixel embeddings weighted by a probability map."""
    p = T.as_tensor(prob.values if isinstance(prob, ProbabilityMap) else prob)
    c, h, w = pixels.data.shape
    if p.shape != (h, w):
        raise DimensionError(f"map {p.shape} vs pixel grid {(h, w)}")
    weighted = pixels.data * p.reshape(1, h, w)
    return weighted.reshape(c, h * w).mean(axis=1)


def predict_distribution_bottomup(pixels: PixelEmbeddings, prob: Tensor | ProbabilityMap,
                                  params: Params, prefix: str = "gsi.bu"
                                  ) -> PerformanceDistribution:
    pooled = pool_masked_pixels(pixels, prob)
    width = params[f"{prefix}.0.w"].shape[0]
    if pooled.shape != (width,):
        raise DimensionError(f"pooled vector {pooled.shape} vs head input ({width},)")
    return _split(mlp(pooled.reshape(1, width), params, prefix).reshape(2))


def sample_confidence(dist: PerformanceDistribution, mode: Mode = "infer",
                      rng: np.random.Generator | None = None) -> Tensor:
    """``mu + sigma * eps`` with ``eps ~ N(0, 1)`` in training, ``mu`` at inference."""
    if mode == "infer":
        return dist.mu
    if mode != "train":
        raise InvalidInputError(f"unknown sampling mode {mode!r}")
    if rng is None:
        raise InvalidInputError("training-mode sampling needs an rng")
    return dist.mu + dist.sigma * float(rng.standard_normal())


def straight_through_select(scores: Tensor) -> Tensor:
    """One-hot of the argmax in the forward pass, identity Jacobian in the backward pass.

    This is ``one_hot + s - stop_gradient(s)`` evaluated without the rounding
    that literally adding and subtracting ``s`` would introduce.
    """
    scores = T.as_tensor(scores)
    if scores.ndim != 1 or scores.shape[0] < 1:
        raise DimensionError(f"scores must be a non-empty vector, got {scores.shape}")
    hard = np.zeros(scores.shape)
    hard[argmax_first(scores.data)] = 1.0
    return Tensor._from_op(hard, (scores,), lambda g: (g,))


def differentiable_topdown(masks: Sequence[BinaryMask], selection: Tensor, scores: Tensor
                           ) -> Tensor:
    """Sum over instances of mask * lambda * score, shape (H, W)."""
    n = len(masks)
    if selection.shape != (n,) or T.as_tensor(scores).shape != (n,):
        raise DimensionError(f"{n} masks, selection {selection.shape}, scores {scores.shape}")
    h, w = masks[0].shape
    stack = np.stack([m.bits.reshape(-1) for m in masks]).astype(np.float64)
    weights = (selection * scores).reshape(1, n)
    return T.matmul(weights, stack).reshape(h, w)


def blend(topdown: Tensor | ProbabilityMap, bottomup: Tensor | ProbabilityMap,
          iou_td: Tensor | float, iou_bu: Tensor | float) -> Tensor:
    td = T.as_tensor(topdown.values if isinstance(topdown, ProbabilityMap) else topdown)
    bu = T.as_tensor(bottomup.values if isinstance(bottomup, ProbabilityMap) else bottomup)
    if td.shape != bu.shape:
        raise DimensionError(f"blend shape mismatch {td.shape} vs {bu.shape}")
    return (td * T.as_tensor(iou_td) + bu * T.as_tensor(iou_bu)) * 0.5
