"""Branch outputs, the two base decoding rules, and the prediction-dump format."""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import CorruptFileError, DimensionError, InvalidInputError
from .tensor import Tensor

DEFAULT_TAU = 0.35
DUMP_VERSION = 1


@dataclass(frozen=True, eq=False)
class BinaryMask:
    bits: np.ndarray  # bool, (H, W)

    def __post_init__(self):
        bits = np.array(self.bits, dtype=bool)
        if bits.ndim != 2 or bits.size == 0:
            raise DimensionError(f"mask must be a non-empty 2-D grid, got shape {bits.shape}")
        bits.flags.writeable = False
        object.__setattr__(self, "bits", bits)

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape

    def area(self) -> int:
        return int(self.bits.sum())

    def __eq__(self, other) -> bool:
        return isinstance(other, BinaryMask) and np.array_equal(self.bits, other.bits)

    def __hash__(self):
        return hash((self.shape, self.bits.tobytes()))


@dataclass(frozen=True, eq=False)
class ProbabilityMap:
    values: np.ndarray  # float64, (H, W)
    logits: bool = False

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float64)
        if vals.ndim != 2:
            raise DimensionError(f"map must be 2-D, got shape {vals.shape}")
        if not self.logits and ((vals < 0).any() or (vals > 1).any()):
            raise InvalidInputError("probability map values must lie in [0, 1]")
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True, eq=False)
class InstanceTripletSet:
    masks: tuple[BinaryMask, ...]
    embeddings: Tensor  # (n, C)
    scores: np.ndarray  # (n,)

    def __post_init__(self):
        masks = tuple(self.masks)
        scores = np.array(self.scores, dtype=np.float64).reshape(-1)
        emb = T.as_tensor(self.embeddings)
        n = len(masks)
        if n == 0:
            raise InvalidInputError("triplet set must hold at least one instance")
        if emb.ndim != 2 or emb.shape[0] != n or scores.size != n:
            raise DimensionError(
                f"triplet counts disagree: {n} masks, embeddings {emb.shape}, {scores.size} scores")
        if len({m.shape for m in masks}) != 1:
            raise DimensionError("all instance masks must share one shape")
        if (scores < 0).any() or (scores > 1).any():
            raise InvalidInputError("alignment scores must lie in [0, 1]")
        scores.flags.writeable = False
        object.__setattr__(self, "masks", masks)
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "embeddings", emb)

    def __len__(self) -> int:
        return len(self.masks)

    @property
    def channels(self) -> int:
        return self.embeddings.shape[1]

    @property
    def spatial_shape(self) -> tuple[int, int]:
        return self.masks[0].shape

    def mask_stack(self) -> np.ndarray:
        """Masks as a float array of shape (n, H, W)."""
        return np.stack([m.bits for m in self.masks]).astype(np.float64)


@dataclass(frozen=True, eq=False)
class PixelEmbeddings:
    data: Tensor  # (C, H, W)

    def __post_init__(self):
        data = T.as_tensor(self.data)
        if data.ndim != 3:
            raise DimensionError(f"pixel embeddings must be C x H x W, got {data.shape}")
        object.__setattr__(self, "data", data)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def spatial_shape(self) -> tuple[int, int]:
        return self.data.shape[1:]


@dataclass(frozen=True, eq=False)
class LinearHead:
    """Per-pixel affine map C -> 1 (a 1x1 convolution)."""

    weight: Tensor  # (C,)
    bias: Tensor  # (1,)


@dataclass(frozen=True, eq=False)
class Sample:
    identifier: str
    ground_truth: BinaryMask
    triplet: InstanceTripletSet
    pixel_embeddings: PixelEmbeddings
    bottom_up_map: ProbabilityMap

    def __post_init__(self):
        shapes = {self.ground_truth.shape, self.triplet.spatial_shape,
                  tuple(self.pixel_embeddings.spatial_shape), self.bottom_up_map.shape}
        if len(shapes) != 1:
            raise DimensionError(f"sample {self.identifier!r}: spatial shapes disagree {shapes}")
        if self.triplet.channels != self.pixel_embeddings.channels:
            raise DimensionError(
                f"sample {self.identifier!r}: instance dim {self.triplet.channels} "
                f"!= pixel dim {self.pixel_embeddings.channels}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.ground_truth.shape


# -- decoding -----------------------------------------------------------------

def argmax_first(values: Sequence[float]) -> int:
    """Index of the largest value, lowest index on ties."""
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if values.size == 0:
        raise InvalidInputError("argmax of an empty sequence")
    return int(np.argmax(values))  # numpy returns the first occurrence


def extract_topdown_result(triplet: InstanceTripletSet) -> tuple[ProbabilityMap, int]:
    """Best-scoring instance mask scaled by its score, plus the chosen index."""
    if len(triplet) == 0:
        raise InvalidInputError("empty triplet set")
    j = argmax_first(triplet.scores)
    return ProbabilityMap(triplet.masks[j].bits * triplet.scores[j]), j


def bottomup_logits(pixels: PixelEmbeddings | Tensor, head: LinearHead) -> Tensor:
    """Per-pixel logits ``w . E_p[:, y, x] + b`` with shape (H, W)."""
    data = pixels.data if isinstance(pixels, PixelEmbeddings) else pixels
    c, h, w = data.shape
    if head.weight.shape != (c,):
        raise DimensionError(f"head expects {head.weight.shape[0]} channels, embeddings have {c}")
    flat = data.reshape(c, h * w).T  # (HW, C)
    logits = T.matmul(flat, head.weight.reshape(c, 1)) + head.bias
    return logits.reshape(h, w)


def decode_bottomup(pixels: PixelEmbeddings, head: LinearHead) -> ProbabilityMap:
    return ProbabilityMap(T.sigmoid(bottomup_logits(pixels, head)).data)


def binarize(prob: ProbabilityMap | np.ndarray, tau: float = DEFAULT_TAU) -> BinaryMask:
    """Strict threshold: a pixel is set iff its value exceeds ``tau``."""
    values = prob.values if isinstance(prob, ProbabilityMap) else np.asarray(prob)
    return BinaryMask(values > tau)


# -- run-length encoding ------------------------------------------------------

def rle_encode(mask: BinaryMask) -> list[int]:
    """Alternating run lengths over the row-major bits, starting with a zero run."""
    flat = mask.bits.reshape(-1)
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs.insert(0, 0)
    return [int(r) for r in runs]


def rle_decode(runs: Sequence[int], height: int, width: int) -> BinaryMask:
    runs = [int(r) for r in runs]
    if any(r < 0 for r in runs) or sum(runs) != height * width:
        raise CorruptFileError(f"run lengths sum to {sum(runs)}, expected {height * width}")
    values = np.zeros(len(runs), dtype=bool)
    values[1::2] = True
    bits = np.repeat(values, runs)
    return BinaryMask(bits.reshape(height, width))


# -- prediction dump ----------------------------------------------------------

def _b64(array: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(array, dtype="<f8").tobytes()).decode("ascii")


def _unb64(text: str, count: int, what: str) -> np.ndarray:
    try:
        raw = base64.b64decode(text.encode("ascii"), validate=True)
    except (ValueError, UnicodeEncodeError) as exc:
        raise CorruptFileError(f"{what}: invalid base64") from exc
    if len(raw) != 8 * count:
        raise CorruptFileError(f"{what}: expected {count} float64 values, got {len(raw)} bytes")
    return np.frombuffer(raw, dtype="<f8").astype(np.float64)


def sample_to_dict(sample: Sample) -> dict:
    h, w = sample.shape
    trip = sample.triplet
    return {
        "id": sample.identifier,
        "H": h,
        "W": w,
        "gt_rle": rle_encode(sample.ground_truth),
        "topdown": {
            "masks_rle": [rle_encode(m) for m in trip.masks],
            "scores": [float(s) for s in trip.scores],
            "embeddings": _b64(trip.embeddings.data),
        },
        "pixel_embeddings": _b64(sample.pixel_embeddings.data.data),
        "bottomup_map": _b64(sample.bottom_up_map.values),
    }


def sample_from_dict(d: dict, channels: int | None = None) -> Sample:
    try:
        h, w = int(d["H"]), int(d["W"])
        td = d["topdown"]
        n = len(td["masks_rle"])
        if n == 0 or len(td["scores"]) != n:
            raise CorruptFileError(f"sample {d.get('id')!r}: inconsistent top-down counts")
        emb_raw = base64.b64decode(td["embeddings"])
        if len(emb_raw) % (8 * n):
            raise CorruptFileError(f"sample {d.get('id')!r}: embedding blob not divisible by n")
        c = len(emb_raw) // (8 * n)
        if channels is not None and c != channels:
            raise CorruptFileError(f"sample {d.get('id')!r}: embedding dim {c} != {channels}")
        emb = _unb64(td["embeddings"], n * c, "embeddings").reshape(n, c)
        pix = _unb64(d["pixel_embeddings"], c * h * w, "pixel_embeddings").reshape(c, h, w)
        bu = _unb64(d["bottomup_map"], h * w, "bottomup_map").reshape(h, w)
        return Sample(
            identifier=str(d["id"]),
            ground_truth=rle_decode(d["gt_rle"], h, w),
            triplet=InstanceTripletSet(
                tuple(rle_decode(r, h, w) for r in td["masks_rle"]),
                Tensor(emb),
                np.array(td["scores"], dtype=np.float64),
            ),
            pixel_embeddings=PixelEmbeddings(Tensor(pix)),
            bottom_up_map=ProbabilityMap(bu),
        )
    except CorruptFileError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptFileError(f"malformed sample record: {exc}") from exc


def dumps_corpus(samples: Sequence[Sample]) -> str:
    doc = {"version": DUMP_VERSION, "samples": [sample_to_dict(s) for s in samples]}
    return json.dumps(doc, separators=(",", ":"))


def loads_corpus(text: str) -> list[Sample]:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CorruptFileError(f"corpus is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("version") != DUMP_VERSION or "samples" not in doc:
        raise CorruptFileError("corpus header missing or unsupported version")
    return [sample_from_dict(s) for s in doc["samples"]]


def save_corpus(samples: Sequence[Sample], path: str | Path) -> None:
    Path(path).write_text(dumps_corpus(samples))


def load_corpus(path: str | Path) -> list[Sample]:
    return loads_corpus(Path(path).read_text())
