"""Complementary feature interaction between the two branches.

Top-down to bottom-up: refined instance embeddings are scattered onto the
pixels their masks cover, concatenated to the pixel embeddings and decoded
with the bottom-up head plus a zero-initialised extension.

Bottom-up to top-down: score-modulated instance embeddings act as queries of
a small pre-norm transformer decoder over the pixel embeddings; a shared score
head re-scores every instance after each layer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .domain import (BinaryMask, InstanceTripletSet, LinearHead, PixelEmbeddings,
                     ProbabilityMap, argmax_first, bottomup_logits)
from .errors import DimensionError, InvalidInputError
from .layers import (Params, init_attention, init_layer_norm, init_linear, init_mlp,
                     layer_norm, linear, mlp, multi_head_attention)
from .tensor import Tensor

SCORE_PRIOR_CLIP = 1e-6


@dataclass(frozen=True)
class InteractionConfig:
    hidden_dim: int = 16
    num_layers: int = 3
    num_heads: int = 4
    ffn_dim: int | None = None
    # When set, each score is sigmoid(logit(s) + head(token)) so that a
    # zero-initialised final score layer reproduces the input scores.
    score_prior: bool = False

    def __post_init__(self):
        if self.hidden_dim % self.num_heads:
            raise InvalidInputError(
                f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")
        if self.num_layers < 1:
            raise InvalidInputError("num_layers must be >= 1")

    @property
    def ffn_width(self) -> int:
        return self.ffn_dim if self.ffn_dim is not None else 4 * self.hidden_dim


@dataclass
class InteractionResult:
    embeddings: Tensor  # (n, C)
    scores: Tensor  # (n,)
    per_layer_scores: list[Tensor]
    cross_attention: list[np.ndarray] = field(default_factory=list)
    self_attention: list[np.ndarray] = field(default_factory=list)


@dataclass
class CfiOutput:
    enhanced_embeddings: Tensor
    enhanced_scores: Tensor
    per_layer_scores: list[Tensor]
    enhanced_pixels: Tensor  # (2C, H, W)
    updated_topdown: ProbabilityMap
    topdown_index: int
    bottomup_prob: Tensor  # (H, W), differentiable
    cross_attention: list[np.ndarray] = field(default_factory=list)

    @property
    def updated_bottomup(self) -> ProbabilityMap:
        return ProbabilityMap(self.bottomup_prob.data)


def init_cfi_params(cfg: InteractionConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    c = cfg.hidden_dim
    params: dict[str, Tensor] = {}
    for layer in range(cfg.num_layers):
        p = f"cfi.l{layer}"
        params.update(init_layer_norm(c, f"{p}.ln_cross"))
        params.update(init_attention(rng, c, f"{p}.cross"))
        params.update(init_layer_norm(c, f"{p}.ln_self"))
        params.update(init_attention(rng, c, f"{p}.self"))
        params.update(init_layer_norm(c, f"{p}.ln_ffn"))
        params.update(init_linear(rng, c, cfg.ffn_width, f"{p}.ffn.0"))
        params.update(init_linear(rng, cfg.ffn_width, c, f"{p}.ffn.1"))
    params.update(init_mlp(rng, [c, c, c, 1], "cfi.score", zero_last=cfg.score_prior))
    params["cfi.ext.w"] = Tensor(np.zeros(c), requires_grad=True)
    return params


def positional_encoding_2d(channels: int, height: int, width: int) -> np.ndarray:
    """Fixed sine/cosine encoding of shape (channels, H, W).

    The first half of the channels encodes the row, the second half the
    column, each as interleaved blocks of sines and cosines.
    """
    if channels % 4:
        raise DimensionError(f"2-D positional encoding needs channels % 4 == 0, got {channels}")
    quarter = channels // 4
    freqs = 1.0 / (10000.0 ** (np.arange(quarter) / quarter))
    ys = (np.arange(height) + 0.5) / height * 2 * math.pi
    xs = (np.arange(width) + 0.5) / width * 2 * math.pi
    ay = ys[:, None] * freqs[None, :]
    ax = xs[:, None] * freqs[None, :]
    pe = np.zeros((channels, height, width))
    pe[:quarter] = np.sin(ay).T[:, :, None]
    pe[quarter:2 * quarter] = np.cos(ay).T[:, :, None]
    pe[2 * quarter:3 * quarter] = np.sin(ax).T[:, None, :]
    pe[3 * quarter:] = np.cos(ax).T[:, None, :]
    return pe


def modulate_embeddings(triplet: InstanceTripletSet, scores: Tensor | None = None) -> Tensor:
    """Scale each instance embedding by its alignment score."""
    if len(triplet) == 0:
        raise InvalidInputError("empty triplet set")
    s = T.as_tensor(triplet.scores if scores is None else scores)
    return triplet.embeddings * s.reshape(len(triplet), 1)


def _score(tokens: Tensor, params: Params, prior_logits: np.ndarray | None) -> Tensor:
    raw = mlp(tokens, params, "cfi.score").reshape(tokens.shape[0])
    if prior_logits is not None:
        raw = raw + prior_logits
    return T.sigmoid(raw)


def feature_interaction(modulated: Tensor, pixels: PixelEmbeddings, cfg: InteractionConfig,
                        params: Params, prior_scores: Sequence[float] | None = None,
                        ) -> InteractionResult:
    n, c = modulated.shape
    if c != cfg.hidden_dim or pixels.channels != c:
        raise DimensionError(
            f"instance dim {c}, pixel dim {pixels.channels}, config dim {cfg.hidden_dim} must agree")
    h, w = pixels.spatial_shape
    memory = pixels.data.reshape(c, h * w).T  # (HW, C)
    keys = memory + positional_encoding_2d(c, h, w).reshape(c, h * w).T
    prior = None
    if cfg.score_prior:
        if prior_scores is None:
            raise InvalidInputError("score_prior requires the original scores")
        s = np.clip(np.asarray(prior_scores, dtype=np.float64), SCORE_PRIOR_CLIP, 1 - SCORE_PRIOR_CLIP)
        prior = np.log(s) - np.log1p(-s)

    tokens = modulated
    per_layer, cross_w, self_w = [], [], []
    for layer in range(cfg.num_layers):
        p = f"cfi.l{layer}"
        out, weights = multi_head_attention(layer_norm(tokens, params, f"{p}.ln_cross"), keys,
                                            memory, params, f"{p}.cross", cfg.num_heads)
        tokens = tokens + out
        cross_w.append(weights)
        normed = layer_norm(tokens, params, f"{p}.ln_self")
        out, weights = multi_head_attention(normed, normed, normed, params, f"{p}.self",
                                            cfg.num_heads)
        tokens = tokens + out
        self_w.append(weights)
        hidden = T.relu(linear(layer_norm(tokens, params, f"{p}.ln_ffn"), params, f"{p}.ffn.0"))
        tokens = tokens + linear(hidden, params, f"{p}.ffn.1")
        per_layer.append(_score(tokens, params, prior))
    return InteractionResult(tokens, per_layer[-1], per_layer, cross_w, self_w)


def update_topdown(triplet: InstanceTripletSet, scores: Sequence[float] | Tensor
                   ) -> tuple[ProbabilityMap, int]:
    """Re-select the top-down mask with refined scores (lowest index wins ties)."""
    s = scores.data if isinstance(scores, Tensor) else np.asarray(scores, dtype=np.float64)
    if s.size != len(triplet):
        raise DimensionError(f"{s.size} scores for {len(triplet)} instances")
    j = argmax_first(s)
    return ProbabilityMap(triplet.masks[j].bits * float(s[j])), j


def assign_instances_to_pixels(embeddings: Tensor, masks: Sequence[BinaryMask]) -> Tensor:
    """At each pixel, the sum of embeddings of all instances covering it; shape (C, H, W)."""
    n, c = embeddings.shape
    if len(masks) != n:
        raise DimensionError(f"{len(masks)} masks for {n} embeddings")
    if len({m.shape for m in masks}) != 1:
        raise DimensionError("mask shapes disagree")
    h, w = masks[0].shape
    cover = np.stack([m.bits.reshape(-1) for m in masks]).astype(np.float64)  # (n, HW)
    return T.matmul(cover.T, embeddings).T.reshape(c, h, w)


def enhance_pixel_embeddings(pixels: PixelEmbeddings, assigned: Tensor) -> Tensor:
    """Channel concatenation: original C channels first, assigned C channels second."""
    if assigned.shape != pixels.data.shape:
        raise DimensionError(f"assigned {assigned.shape} vs pixels {pixels.data.shape}")
    return T.concat([pixels.data, assigned], axis=0)


def enhanced_logits(enhanced: Tensor, base_head: LinearHead, extension: Tensor) -> Tensor:
    two_c, h, w = enhanced.shape
    c = base_head.weight.shape[0]
    if two_c != 2 * c or extension.shape != (c,):
        raise DimensionError(
            f"enhanced embeddings {enhanced.shape} need 2x{c} channels, extension {extension.shape}")
    base = bottomup_logits(enhanced[:c], base_head)
    appended = enhanced[c:].reshape(c, h * w).T
    return base + T.matmul(appended, extension.reshape(c, 1)).reshape(h, w)


def decode_enhanced(enhanced: Tensor, base_head: LinearHead, extension: Tensor) -> ProbabilityMap:
    return ProbabilityMap(T.sigmoid(enhanced_logits(enhanced, base_head, extension)).data)


def run_cfi(triplet: InstanceTripletSet, pixels: PixelEmbeddings, base_head: LinearHead,
            params: Params, cfg: InteractionConfig) -> CfiOutput:
    inter = feature_interaction(modulate_embeddings(triplet), pixels, cfg, params,
                                prior_scores=triplet.scores)
    topdown, j = update_topdown(triplet, inter.scores)
    enhanced = enhance_pixel_embeddings(
        pixels, assign_instances_to_pixels(inter.embeddings, triplet.masks))
    prob = T.sigmoid(enhanced_logits(enhanced, base_head, params["cfi.ext.w"]))
    return CfiOutput(inter.embeddings, inter.scores, inter.per_layer_scores, enhanced,
                     topdown, j, prob, inter.cross_attention)
