"""Synthetic scenes and branch simulators with controllable failure modes.

The top-down simulator returns every instance with a score ranking that
selects a wrong instance with probability ``p_pn`` (a polar-negative sample
by construction). The bottom-up simulator thresholds the referred object but
peels a fraction ``ip_erosion`` of its pixels from the boundary inwards (an
inferior-positive sample). Embeddings carry engineered cues so that learned
heads have something to learn from.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np
from scipy import ndimage

from .domain import (DEFAULT_TAU, BinaryMask, InstanceTripletSet, PixelEmbeddings,
                     ProbabilityMap, Sample, binarize, decode_bottomup, extract_topdown_result)
from .errors import ConfigError, GenerationError, InvalidInputError
from .evaluation import BASELINE_STRATEGIES, baseline_integrate, iou
from .layers import Params
from .model import BOTTOMUP_LOGIT_CHANNEL, ModelConfig, forward, selector_head
from .tensor import Tensor

ShapeFamily = Literal["rectangle", "ellipse"]

MIN_INSTANCE_PIXELS = 4
PLACEMENT_ATTEMPTS = 500
# Bottom-up logit ranges.
KEPT_LOGIT = (4.0, 6.5)
ERODED_LOGIT = (-2.5, -1.0)
BACKGROUND_LOGIT = -6.0
# Instance score ranges before noise.
REFERRED_SCORE = (0.6, 0.95)
OTHER_SCORE = (0.05, 0.45)
CUE_NOISE = 0.25
AFFINITY_LEVEL = 3.0
AFFINITY_NOISE = 0.3
PAD_NOISE = 0.1
FEATURE_CHANNELS = 6  # instance features before noise padding
PIXEL_FEATURE_CHANNELS = 5


@dataclass(frozen=True)
class SceneSpec:
    height: int = 32
    width: int = 32
    min_instances: int = 2
    max_instances: int = 5
    shape_family: ShapeFamily = "rectangle"
    embedding_dim: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.height < 2 or self.width < 2:
            raise InvalidInputError("canvas must be at least 2x2")
        if not 1 <= self.min_instances <= self.max_instances:
            raise InvalidInputError("need 1 <= min_instances <= max_instances")
        if self.shape_family not in ("rectangle", "ellipse"):
            raise InvalidInputError(f"unknown shape family {self.shape_family!r}")
        if self.embedding_dim < max(FEATURE_CHANNELS, PIXEL_FEATURE_CHANNELS) or self.embedding_dim % 4:
            raise InvalidInputError("embedding_dim must be a multiple of 4 and at least 8")


@dataclass(frozen=True)
class ErrorProfile:
    p_pn: float = 0.3
    ip_erosion: float = 0.3
    score_noise: float = 0.02
    map_noise: float = 0.3
    cue_noise: float = CUE_NOISE  # noise on the instance IoU cue

    def __post_init__(self):
        if not 0.0 <= self.p_pn <= 1.0:
            raise InvalidInputError("p_pn must lie in [0, 1]")
        if not 0.0 <= self.ip_erosion < 1.0:
            raise InvalidInputError("ip_erosion must lie in [0, 1)")
        if min(self.score_noise, self.map_noise, self.cue_noise) < 0:
            raise InvalidInputError("noise scales must be non-negative")


@dataclass(frozen=True)
class Scene:
    instances: tuple[BinaryMask, ...]
    referred: int

    @property
    def ground_truth(self) -> BinaryMask:
        return self.instances[self.referred]

    @property
    def shape(self) -> tuple[int, int]:
        return self.instances[0].shape


def _shape_mask(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    """A single shape on its own tight canvas."""
    hi_h = max(3, spec.height // 3)
    hi_w = max(3, spec.width // 3)
    for _ in range(PLACEMENT_ATTEMPTS):
        h = int(rng.integers(2, hi_h + 1))
        w = int(rng.integers(2, hi_w + 1))
        if h > spec.height or w > spec.width:
            continue
        if spec.shape_family == "rectangle":
            shape = np.ones((h, w), dtype=bool)
        else:
            yy, xx = np.mgrid[0:h, 0:w]
            cy, cx = (h - 1) / 2, (w - 1) / 2
            shape = ((yy - cy) / (h / 2)) ** 2 + ((xx - cx) / (w / 2)) ** 2 <= 1.0
        if shape.sum() >= MIN_INSTANCE_PIXELS:
            return shape
    raise GenerationError("could not draw a shape with enough pixels on this canvas")


def generate_scene(spec: SceneSpec, rng: np.random.Generator) -> Scene:
    """Disjoint instances separated by at least one background pixel, one of them referred."""
    count = int(rng.integers(spec.min_instances, spec.max_instances + 1))
    occupied = np.zeros((spec.height, spec.width), dtype=bool)
    masks = []
    for _ in range(count):
        for _ in range(PLACEMENT_ATTEMPTS):
            shape = _shape_mask(spec, rng)
            sh, sw = shape.shape
            y = int(rng.integers(0, spec.height - sh + 1))
            x = int(rng.integers(0, spec.width - sw + 1))
            canvas = np.zeros_like(occupied)
            canvas[y:y + sh, x:x + sw] = shape
            if not (ndimage.binary_dilation(canvas) & occupied).any():
                occupied |= canvas
                masks.append(BinaryMask(canvas))
                break
        else:
            raise GenerationError(
                f"canvas {spec.height}x{spec.width} too small for {count} disjoint instances")
    return Scene(tuple(masks), int(rng.integers(0, count)))


def _instance_features(mask: BinaryMask, gt: BinaryMask) -> list[float]:
    h, w = mask.shape
    ys, xs = np.nonzero(mask.bits)
    return [
        2 * (xs.mean() + 0.5) / w - 1,
        2 * (ys.mean() + 0.5) / h - 1,
        np.sqrt(mask.area() / (h * w)),
        (xs.max() - xs.min() + 1) / w,
        (ys.max() - ys.min() + 1) / h,
        iou(mask, gt),
    ]


def simulate_topdown(scene: Scene, profile: ErrorProfile, rng: np.random.Generator,
                     channels: int = 16) -> InstanceTripletSet:
    n = len(scene.instances)
    gt = scene.ground_truth
    emb = rng.normal(0.0, PAD_NOISE, size=(n, channels))
    for j, m in enumerate(scene.instances):
        feats = _instance_features(m, gt)
        feats[-1] += rng.normal(0.0, profile.cue_noise)
        emb[j, :FEATURE_CHANNELS] = feats

    scores = rng.uniform(*OTHER_SCORE, size=n)
    top = scene.referred
    if n > 1 and rng.random() < profile.p_pn:
        top = int(rng.choice([j for j in range(n) if j != scene.referred]))
    scores[top] = rng.uniform(*REFERRED_SCORE)
    if top != scene.referred:
        scores[scene.referred] = rng.uniform(OTHER_SCORE[1], REFERRED_SCORE[0])
    scores = np.clip(scores + rng.normal(0.0, profile.score_noise, size=n), 0.01, 0.99)
    # Noise must not change which instance wins.
    best = int(np.argmax(scores))
    if best != top:
        scores[[best, top]] = scores[[top, best]]
    return InstanceTripletSet(scene.instances, Tensor(emb), scores)


def erosion_order(mask: BinaryMask, rng: np.random.Generator) -> np.ndarray:
    """Flat indices of the mask's pixels, outermost first (random among equal depth)."""
    depth = ndimage.distance_transform_cdt(np.pad(mask.bits, 1), metric="taxicab")[1:-1, 1:-1]
    idx = np.flatnonzero(mask.bits)
    d = depth.reshape(-1)[idx]
    return idx[np.lexsort((rng.random(idx.size), d))]


def simulate_bottomup(scene: Scene, profile: ErrorProfile, rng: np.random.Generator,
                      channels: int = 16, target: int | None = None
                      ) -> tuple[PixelEmbeddings, ProbabilityMap]:
    """Pixel embeddings and the probability map decoded from them.

    ``target`` picks which instance the map segments (default: the referred
    one); pointing it elsewhere simulates a wholly wrong bottom-up prediction.
    """
    h, w = scene.shape
    hw = h * w
    goal = scene.instances[scene.referred if target is None else target]
    logits = BACKGROUND_LOGIT + profile.map_noise * rng.standard_normal(hw)
    inside = np.flatnonzero(goal.bits)
    logits[inside] = rng.uniform(*KEPT_LOGIT, size=inside.size)
    k = int(round(profile.ip_erosion * inside.size))
    if k:
        peeled = erosion_order(goal, rng)[:k]
        logits[peeled] = rng.uniform(*ERODED_LOGIT, size=k)

    data = rng.normal(0.0, PAD_NOISE, size=(channels, hw))
    yy, xx = np.mgrid[0:h, 0:w]
    data[BOTTOMUP_LOGIT_CHANNEL] = logits
    data[1] = (2 * (xx.reshape(-1) + 0.5) / w - 1)
    data[2] = (2 * (yy.reshape(-1) + 0.5) / h - 1)
    gt_sign = 2.0 * scene.ground_truth.bits.reshape(-1) - 1.0
    data[3] = AFFINITY_LEVEL * gt_sign + AFFINITY_NOISE * rng.standard_normal(hw)
    data[4] = 1.0
    pixels = PixelEmbeddings(Tensor(data.reshape(channels, h, w)))
    return pixels, decode_bottomup(pixels, selector_head(channels))


def sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def make_sample(spec: SceneSpec, profile: ErrorProfile, seed: int, index: int,
                bottomup_target: str = "referred") -> Sample:
    rng = sample_rng(seed, index)
    scene = generate_scene(spec, rng)
    trip = simulate_topdown(scene, profile, rng, spec.embedding_dim)
    target = None
    if bottomup_target == "wrong" and len(scene.instances) > 1:
        target = (scene.referred + 1) % len(scene.instances)
    pixels, prob = simulate_bottomup(scene, profile, rng, spec.embedding_dim, target)
    return Sample(f"s{index:05d}", scene.ground_truth, trip, pixels, prob)


def generate_corpus(count: int, spec: SceneSpec, profile: ErrorProfile,
                    seed: int | None = None) -> list[Sample]:
    """A pure function of (spec, profile, seed); sample i uses the rng stream (seed, i)."""
    if count < 1:
        raise InvalidInputError("count must be >= 1")
    seed = spec.seed if seed is None else seed
    return [make_sample(spec, profile, seed, i) for i in range(count)]


def oracle_separable_corpus(count: int, seed: int = 0, spec: SceneSpec | None = None
                            ) -> list[Sample]:
    """Alternating samples: even ones have a perfect top-down and a wrong bottom-up
    branch, odd ones the reverse."""
    spec = spec or SceneSpec(seed=seed)
    perfect, wrong_td = ErrorProfile(0.0, 0.0, 0.0, 0.0, 0.0), ErrorProfile(1.0, 0.0, 0.0, 0.0, 0.0)
    out = []
    for i in range(count):
        if i % 2 == 0:
            out.append(make_sample(spec, perfect, seed, i, bottomup_target="wrong"))
        else:
            out.append(make_sample(spec, wrong_td, seed, i))
    return out


# -- pipeline -----------------------------------------------------------------

BASELINE_MODES = BASELINE_STRATEGIES
LEARNED_MODES = ("si", "gsi", "si+cfi", "gsi+cfi")
ALL_MODES = BASELINE_MODES + LEARNED_MODES


@dataclass
class SampleResult:
    identifier: str
    fused: BinaryMask
    topdown: BinaryMask
    bottomup: BinaryMask
    iou_fused: float
    iou_topdown: float
    iou_bottomup: float
    topdown_index: int
    confidences: tuple[float, float] | None = None
    per_layer_scores: list[list[float]] = field(default_factory=list)
    per_layer_ious: list[float] = field(default_factory=list)


def _check_model(mode: str, params: Params | None, cfg: ModelConfig | None) -> None:
    if params is None or cfg is None:
        raise ConfigError(f"mode {mode!r} needs a trained checkpoint")
    if cfg.mode_name != mode:
        raise ConfigError(f"checkpoint was trained for {cfg.mode_name!r}, not {mode!r}")


def run_sample(sample: Sample, mode: str, params: Params | None = None,
               cfg: ModelConfig | None = None, tau: float = DEFAULT_TAU,
               confidence_override: tuple[float, float] | None = None) -> SampleResult:
    gt = sample.ground_truth
    if mode in BASELINE_MODES:
        td_map, j = extract_topdown_result(sample.triplet)
        fused = baseline_integrate(td_map, sample.bottom_up_map, mode, tau)
        td_mask = sample.triplet.masks[j]
        bu_mask = binarize(sample.bottom_up_map, tau)
        return SampleResult(sample.identifier, fused, td_mask, bu_mask, iou(fused, gt),
                            iou(td_mask, gt), iou(bu_mask, gt), j)
    if mode not in LEARNED_MODES:
        raise InvalidInputError(f"unknown mode {mode!r}; expected one of {ALL_MODES}")
    _check_model(mode, params, cfg)
    out = forward(sample, params, cfg, "infer", None, confidence_override)
    fused = binarize(out.fused.data, tau)
    td_mask = sample.triplet.masks[out.topdown_index]
    bu_mask = binarize(out.bottomup.data, tau)
    layer_ious = [iou(sample.triplet.masks[int(np.argmax(s))], gt) for s in out.per_layer_scores]
    return SampleResult(sample.identifier, fused, td_mask, bu_mask, iou(fused, gt),
                        iou(td_mask, gt), iou(bu_mask, gt), out.topdown_index,
                        (float(out.iou_td.data), float(out.iou_bu.data)),
                        [s.tolist() for s in out.per_layer_scores], layer_ious)


def run_pipeline(corpus: Sequence[Sample], mode: str, params: Params | None = None,
                 cfg: ModelConfig | None = None, tau: float = DEFAULT_TAU,
                 confidence_override: tuple[float, float] | None = None) -> list[SampleResult]:
    if mode in LEARNED_MODES:
        _check_model(mode, params, cfg)
    return [run_sample(s, mode, params, cfg, tau, confidence_override) for s in corpus]
