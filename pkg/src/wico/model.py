"""The full interaction-then-integration forward pass for one sample."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Literal

import numpy as np

from .cfi import InteractionConfig, init_cfi_params, modulate_embeddings, run_cfi
from .domain import LinearHead, Sample, argmax_first
from .errors import ConfigError
from .evaluation import init_si_params, si_confidence
from .gsi import (PerformanceDistribution, blend, differentiable_topdown, init_gsi_params,
                  predict_distribution_bottomup, predict_distribution_topdown, sample_confidence,
                  straight_through_select)
from .layers import Params
from .tensor import Tensor

Integration = Literal["gsi", "si"]
BOTTOMUP_LOGIT_CHANNEL = 0
FROZEN_PREFIXES = ("bu_head.",)


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 16
    use_cfi: bool = True
    integration: Integration = "gsi"
    num_layers: int = 3
    num_heads: int = 4
    ffn_dim: int | None = None
    score_prior: bool = True

    def __post_init__(self):
        if self.integration not in ("gsi", "si"):
            raise ConfigError(f"unknown integration {self.integration!r}")

    @property
    def interaction(self) -> InteractionConfig:
        return InteractionConfig(self.channels, self.num_layers, self.num_heads, self.ffn_dim,
                                 self.score_prior)

    @property
    def mode_name(self) -> str:
        return self.integration + ("+cfi" if self.use_cfi else "")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def selector_head(channels: int) -> LinearHead:
    """Bottom-up head reading the logit channel the harness writes (frozen branch weights)."""
    w = np.zeros(channels)
    w[BOTTOMUP_LOGIT_CHANNEL] = 1.0
    return LinearHead(Tensor(w), Tensor(np.zeros(1)))


def init_model(cfg: ModelConfig, seed: int) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    head = selector_head(cfg.channels)
    params: dict[str, Tensor] = {"bu_head.w": head.weight, "bu_head.b": head.bias}
    if cfg.use_cfi:
        params.update(init_cfi_params(cfg.interaction, rng))
    if cfg.integration == "gsi":
        params.update(init_gsi_params(cfg.channels, rng))
    else:
        params.update(init_si_params(cfg.channels, rng))
    return params


def trainable_names(params: Params) -> list[str]:
    return [k for k in params if not k.startswith(FROZEN_PREFIXES)]


@dataclass
class ForwardOutput:
    fused: Tensor  # (H, W), blended map before clamping
    topdown: Tensor  # differentiable top-down map
    bottomup: Tensor  # (updated) bottom-up probability map
    scores: Tensor  # scores used for the selection
    topdown_index: int
    iou_td: Tensor
    iou_bu: Tensor
    dist_td: PerformanceDistribution | None = None
    dist_bu: PerformanceDistribution | None = None
    per_layer_scores: list[np.ndarray] = field(default_factory=list)


def forward(sample: Sample, params: Params, cfg: ModelConfig, mode: str = "infer",
            rng: np.random.Generator | None = None,
            confidence_override: tuple[float, float] | None = None) -> ForwardOutput:
    trip = sample.triplet
    head = LinearHead(params["bu_head.w"], params["bu_head.b"])
    per_layer: list[np.ndarray] = []
    if cfg.use_cfi:
        out = run_cfi(trip, sample.pixel_embeddings, head, params, cfg.interaction)
        scores, embeddings, bottomup = out.enhanced_scores, out.enhanced_embeddings, out.bottomup_prob
        per_layer = [s.data.copy() for s in out.per_layer_scores]
    else:
        scores = Tensor(trip.scores)
        embeddings = modulate_embeddings(trip)
        bottomup = Tensor(sample.bottom_up_map.values)

    selection = straight_through_select(scores)
    topdown = differentiable_topdown(trip.masks, selection, scores)
    j = argmax_first(scores.data)
    chosen = embeddings[j]

    dist_td = dist_bu = None
    if cfg.integration == "gsi":
        dist_td = predict_distribution_topdown(chosen, params)
        dist_bu = predict_distribution_bottomup(sample.pixel_embeddings, bottomup, params)
        iou_td = sample_confidence(dist_td, mode, rng)
        iou_bu = sample_confidence(dist_bu, mode, rng)
    else:
        iou_td, iou_bu = si_confidence(chosen, sample.pixel_embeddings, bottomup, params)
    if confidence_override is not None:
        iou_td, iou_bu = (Tensor(float(v)) for v in confidence_override)

    fused = blend(topdown, bottomup, iou_td, iou_bu)
    return ForwardOutput(fused, topdown, bottomup, scores, j, iou_td, iou_bu, dist_td, dist_bu,
                         per_layer)
