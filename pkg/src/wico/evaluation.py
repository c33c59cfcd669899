"""Segmentation metrics, error taxonomy, IoU density curves and fixed fusion baselines."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .domain import DEFAULT_TAU, BinaryMask, PixelEmbeddings, ProbabilityMap, binarize
from .errors import DimensionError, InvalidInputError
from .gsi import head_widths, pool_masked_pixels
from .layers import Params, init_mlp, mlp
from .tensor import Tensor

POSITIVE_THRESHOLD = 0.5
PN_EDGE = 0.1
IP_UPPER = 0.8
KDE_GRID_POINTS = 512
MIN_BANDWIDTH = 1e-3


class ErrorBin(str, Enum):
    POLAR_NEGATIVE = "PolarNegative"
    OTHER_NEGATIVE = "OtherNegative"
    INFERIOR_POSITIVE = "InferiorPositive"
    HIGH_POSITIVE = "HighPositive"


def iou(a: BinaryMask, b: BinaryMask) -> float:
    if a.shape != b.shape:
        raise DimensionError(f"iou shape mismatch {a.shape} vs {b.shape}")
    inter, union = _counts(a, b)
    return 1.0 if union == 0 else inter / union


def _counts(a: BinaryMask, b: BinaryMask) -> tuple[int, int]:
    return int(np.count_nonzero(a.bits & b.bits)), int(np.count_nonzero(a.bits | b.bits))


def corpus_iou(pairs: Iterable[tuple[BinaryMask, BinaryMask]]) -> tuple[float, float]:
    """Overall IoU (summed intersections over summed unions) and mean per-sample IoU."""
    inter_total = union_total = 0
    per_sample = []
    for pred, gt in pairs:
        if pred.shape != gt.shape:
            raise DimensionError(f"iou shape mismatch {pred.shape} vs {gt.shape}")
        inter, union = _counts(pred, gt)
        inter_total += inter
        union_total += union
        per_sample.append(1.0 if union == 0 else inter / union)
    if not per_sample:
        raise InvalidInputError("corpus_iou needs at least one pair")
    overall = 1.0 if union_total == 0 else inter_total / union_total
    return overall, float(np.mean(per_sample))


def error_bin(value: float, pn_edge: float = PN_EDGE) -> ErrorBin:
    if value < pn_edge:
        return ErrorBin.POLAR_NEGATIVE
    if value < POSITIVE_THRESHOLD:
        return ErrorBin.OTHER_NEGATIVE
    if value <= IP_UPPER:
        return ErrorBin.INFERIOR_POSITIVE
    return ErrorBin.HIGH_POSITIVE


@dataclass
class ErrorCounts:
    counts: dict[str, int]
    total: int
    positives: int  # IoU > 0.5
    negatives: int

    @property
    def rates(self) -> dict[str, float]:
        return {k: v / self.total for k, v in self.counts.items()}

    def to_dict(self) -> dict:
        return {"counts": dict(self.counts), "rates": self.rates, "total": self.total,
                "positives": self.positives, "negatives": self.negatives}


def classify_errors(ious: Sequence[float], pn_edge: float = PN_EDGE) -> ErrorCounts:
    """Bin IoU values into PN [0, pn_edge), other negative, IP [0.5, 0.8] and high positive.

    Note that IoU exactly 0.5 lands in the IP bin but is not counted as a
    positive, since positives are defined as IoU > 0.5.
    """
    values = np.asarray(list(ious), dtype=np.float64)
    if values.size and (np.isnan(values).any() or (values < 0).any() or (values > 1).any()):
        raise InvalidInputError("IoU values must lie in [0, 1]")
    counts = {b.value: 0 for b in ErrorBin}
    for v in values:
        counts[error_bin(float(v), pn_edge).value] += 1
    positives = int((values > POSITIVE_THRESHOLD).sum())
    return ErrorCounts(counts, int(values.size), positives, int(values.size) - positives)


def scott_bandwidth(values: np.ndarray) -> float:
    n = values.size
    std = float(np.std(values, ddof=1)) if n > 1 else 0.0
    return max(n ** (-0.2) * std, MIN_BANDWIDTH)


def kde_curve(ious: Sequence[float], bandwidth: float | str | None = "scott",
              grid: Sequence[float] | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian-kernel density of ``ious`` evaluated on ``grid``.

    ``bandwidth`` is a positive number or ``"scott"``/``None`` for Scott's
    rule. The default grid is 512 evenly spaced points on [0, 1]. Returns
    ``(grid, density)``.
    """
    x = np.asarray(list(ious), dtype=np.float64)
    if x.size == 0:
        raise InvalidInputError("kde_curve needs at least one observation")
    if bandwidth is None or bandwidth == "scott":
        h = scott_bandwidth(x)
    else:
        h = float(bandwidth)
        if not h > 0:
            raise InvalidInputError("bandwidth must be positive")
    g = np.linspace(0.0, 1.0, KDE_GRID_POINTS) if grid is None else np.asarray(grid, np.float64)
    z = (g[:, None] - x[None, :]) / h
    density = np.exp(-0.5 * z * z).sum(axis=1) / (x.size * h * math.sqrt(2 * math.pi))
    return g, density


def mutually_exclusive_rate(ious_a: Sequence[float], ious_b: Sequence[float]) -> float:
    """Fraction of samples where exactly one of the two predictions is positive."""
    a = np.asarray(list(ious_a), dtype=np.float64)
    b = np.asarray(list(ious_b), dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInputError(f"length mismatch {a.size} vs {b.size}")
    if a.size == 0:
        raise InvalidInputError("mutually_exclusive_rate needs at least one sample")
    for v in (a, b):
        if (v < 0).any() or (v > 1).any():
            raise InvalidInputError("IoU values must lie in [0, 1]")
    return float(np.mean((a > POSITIVE_THRESHOLD) != (b > POSITIVE_THRESHOLD)))


BASELINE_STRATEGIES = ("intersection", "union", "average")


def baseline_integrate(topdown: ProbabilityMap, bottomup: ProbabilityMap, strategy: str,
                       tau: float = DEFAULT_TAU) -> BinaryMask:
    if topdown.shape != bottomup.shape:
        raise DimensionError(f"map shape mismatch {topdown.shape} vs {bottomup.shape}")
    if strategy == "average":
        return binarize((topdown.values + bottomup.values) / 2.0, tau)
    td, bu = binarize(topdown, tau).bits, binarize(bottomup, tau).bits
    if strategy == "intersection":
        return BinaryMask(td & bu)
    if strategy == "union":
        return BinaryMask(td | bu)
    raise InvalidInputError(f"unknown strategy {strategy!r}; expected one of {BASELINE_STRATEGIES}")


# -- scoring integration ablation (point-estimate confidences) ---------------

def init_si_params(channels: int, rng: np.random.Generator) -> dict[str, Tensor]:
    params = init_mlp(rng, head_widths(channels, 1), "si.td")
    params.update(init_mlp(rng, head_widths(channels, 1), "si.bu"))
    return params


def si_confidence(selected_embedding: Tensor, pixels: PixelEmbeddings,
                  prob: Tensor | ProbabilityMap, params: Params) -> tuple[Tensor, Tensor]:
    """Single sigmoid confidence per branch, no variance and no sampling."""
    c = params["si.td.0.w"].shape[0]
    if selected_embedding.shape != (c,):
        raise DimensionError(f"embedding {selected_embedding.shape} vs head input ({c},)")
    td = T.sigmoid(mlp(selected_embedding.reshape(1, c), params, "si.td").reshape(()))
    pooled = pool_masked_pixels(pixels, prob)
    bu = T.sigmoid(mlp(pooled.reshape(1, c), params, "si.bu").reshape(()))
    return td, bu
