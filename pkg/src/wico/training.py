"""Joint optimisation of the interaction and integration heads."""

from __future__ import annotations

import base64
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .domain import DEFAULT_TAU, Sample, binarize
from .errors import CorruptFileError, InvalidInputError, TrainingError
from .evaluation import iou
from .layers import Params
from .model import ForwardOutput, ModelConfig, forward, init_model, trainable_names
from .tensor import Tensor

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-5
    weight_decay: float = 5e-2
    iterations: int = 5000
    batch_size: int = 24
    loss_weights: tuple[float, float] = (1.0, 1.0)  # (segmentation, confidence)
    seed: int = 0
    tau: float = DEFAULT_TAU
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise InvalidInputError("learning rate must be positive and weight decay non-negative")
        if self.iterations < 1 or self.batch_size < 1:
            raise InvalidInputError("iterations and batch_size must be >= 1")
        object.__setattr__(self, "loss_weights", tuple(float(w) for w in self.loss_weights))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss_weights"] = list(self.loss_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


# -- losses -------------------------------------------------------------------

def branch_iou_targets(sample: Sample, topdown: Tensor | np.ndarray, bottomup: Tensor | np.ndarray,
                       tau: float = DEFAULT_TAU) -> tuple[float, float]:
    """Ground-truth IoU of each branch's binarised prediction."""
    td = topdown.data if isinstance(topdown, Tensor) else np.asarray(topdown)
    bu = bottomup.data if isinstance(bottomup, Tensor) else np.asarray(bottomup)
    gt = sample.ground_truth
    return iou(binarize(td, tau), gt), iou(binarize(bu, tau), gt)


@dataclass
class LossTerms:
    total: Tensor
    segmentation: float
    confidence: float


def total_loss(sample: Sample, out: ForwardOutput, weights: tuple[float, float] = (1.0, 1.0),
               tau: float = DEFAULT_TAU) -> LossTerms:
    w_seg, w_conf = weights
    gt = sample.ground_truth.bits.astype(np.float64)
    seg = T.binary_cross_entropy_loss(out.fused, gt)
    target_td, target_bu = branch_iou_targets(sample, out.topdown, out.bottomup, tau)
    conf = (T.smooth_l1_loss(out.iou_td.reshape(1), np.array([target_td]))
            + T.smooth_l1_loss(out.iou_bu.reshape(1), np.array([target_bu])))
    total = seg * w_seg + conf * w_conf
    return LossTerms(total, float(seg.data), float(conf.data))


def batch_loss(samples: Sequence[Sample], params: Params, model_cfg: ModelConfig,
               cfg: TrainConfig, rng: np.random.Generator | None, mode: str = "train"
               ) -> tuple[Tensor, dict[str, float]]:
    totals, seg, conf = [], 0.0, 0.0
    for s in samples:
        terms = total_loss(s, forward(s, params, model_cfg, mode, rng), cfg.loss_weights, cfg.tau)
        totals.append(terms.total)
        seg += terms.segmentation
        conf += terms.confidence
    n = len(samples)
    loss = T.stack([t.reshape(()) for t in totals]).mean()
    return loss, {"loss": float(loss.data), "seg": seg / n, "conf": conf / n}


# -- optimiser ----------------------------------------------------------------

@dataclass
class AdamWState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_update(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamWState,
                 cfg: TrainConfig) -> tuple[dict[str, Tensor], AdamWState]:
    """One AdamW step with decoupled weight decay; returns fresh params and state."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
    t = state.step + 1
    lr, wd, b1, b2 = cfg.learning_rate, cfg.weight_decay, cfg.beta1, cfg.beta2
    new_params = dict(params)
    new_m, new_v = dict(state.m), dict(state.v)
    for name, g in grads.items():
        p = params[name].data
        m = b1 * state.m.get(name, np.zeros_like(p)) + (1 - b1) * g
        v = b2 * state.v.get(name, np.zeros_like(p)) + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        updated = p * (1 - lr * wd) - lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
        new_params[name] = Tensor(updated, requires_grad=True)
        new_m[name], new_v[name] = m, v
    return new_params, AdamWState(t, new_m, new_v)


def train_step(batch: Sequence[Sample], params: Mapping[str, Tensor], state: AdamWState,
               model_cfg: ModelConfig, cfg: TrainConfig, rng: np.random.Generator
               ) -> tuple[dict[str, Tensor], AdamWState, dict[str, float]]:
    names = trainable_names(params)
    live = dict(params)
    for name in names:
        live[name] = Tensor(params[name].data, requires_grad=True)
    loss, metrics = batch_loss(batch, live, model_cfg, cfg, rng)
    loss.backward()
    grads = {n: live[n].grad if live[n].grad is not None else np.zeros(live[n].shape)
             for n in names}
    new_params, new_state = adamw_update(live, grads, state, cfg)
    return new_params, new_state, metrics


@dataclass
class FitResult:
    params: dict[str, Tensor]
    curve: list[dict[str, float]]
    model_config: ModelConfig
    train_config: TrainConfig


def fit(corpus: Sequence[Sample], model_cfg: ModelConfig, cfg: TrainConfig,
        params: dict[str, Tensor] | None = None) -> FitResult:
    """Run ``cfg.iterations`` steps over shuffled mini-batches drawn without replacement per epoch."""
    if not corpus:
        raise InvalidInputError("cannot train on an empty corpus")
    rng = np.random.default_rng(cfg.seed)
    params = init_model(model_cfg, cfg.seed) if params is None else dict(params)
    state = AdamWState()
    order = np.empty(0, dtype=int)
    curve = []
    for it in range(cfg.iterations):
        if order.size < cfg.batch_size:
            order = np.concatenate([order, rng.permutation(len(corpus))])
        idx, order = order[:cfg.batch_size], order[cfg.batch_size:]
        params, state, metrics = train_step([corpus[i] for i in idx], params, state, model_cfg,
                                            cfg, rng)
        curve.append(metrics)
        if (it + 1) % 100 == 0:
            log.info("iter %d loss %.4f seg %.4f conf %.4f", it + 1, metrics["loss"],
                     metrics["seg"], metrics["conf"])
    return FitResult(params, curve, model_cfg, cfg)


# -- checkpoints --------------------------------------------------------------

def checkpoint_dict(params: Mapping[str, Tensor], model_cfg: ModelConfig,
                    train_cfg: TrainConfig | None = None) -> dict:
    blobs = {}
    for name in sorted(params):
        data = np.ascontiguousarray(params[name].data, dtype="<f8")
        blobs[name] = {"shape": list(data.shape),
                       "data": base64.b64encode(data.tobytes()).decode("ascii")}
    return {
        "version": CHECKPOINT_VERSION,
        "model": model_cfg.to_dict(),
        "train": train_cfg.to_dict() if train_cfg is not None else None,
        "seed": train_cfg.seed if train_cfg is not None else None,
        "params": blobs,
    }


def dumps_checkpoint(params: Mapping[str, Tensor], model_cfg: ModelConfig,
                     train_cfg: TrainConfig | None = None) -> str:
    return json.dumps(checkpoint_dict(params, model_cfg, train_cfg), sort_keys=True,
                      separators=(",", ":"))


def loads_checkpoint(text: str) -> tuple[dict[str, Tensor], ModelConfig, TrainConfig | None]:
    try:
        doc = json.loads(text)
        if doc.get("version") != CHECKPOINT_VERSION:
            raise CorruptFileError("unsupported checkpoint version")
        model_cfg = ModelConfig.from_dict(doc["model"])
        train_cfg = TrainConfig.from_dict(doc["train"]) if doc.get("train") else None
        params = {}
        for name, blob in doc["params"].items():
            shape = tuple(int(s) for s in blob["shape"])
            raw = base64.b64decode(blob["data"].encode("ascii"), validate=True)
            if len(raw) != 8 * int(np.prod(shape, dtype=np.int64)):
                raise CorruptFileError(f"parameter {name!r}: blob size does not match shape")
            data = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
            params[name] = Tensor(data, requires_grad=not name.startswith("bu_head."))
    except CorruptFileError:
        raise
    except (json.JSONDecodeError, KeyError, TypeError, ValueError, AttributeError) as exc:
        raise CorruptFileError(f"malformed checkpoint: {exc}") from exc
    return params, model_cfg, train_cfg


def save_checkpoint(path: str | Path, params: Mapping[str, Tensor], model_cfg: ModelConfig,
                    train_cfg: TrainConfig | None = None) -> None:
    Path(path).write_text(dumps_checkpoint(params, model_cfg, train_cfg))


def load_checkpoint(path: str | Path) -> tuple[dict[str, Tensor], ModelConfig, TrainConfig | None]:
    return loads_checkpoint(Path(path).read_text())
