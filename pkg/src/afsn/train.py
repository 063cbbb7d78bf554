"""Pair-at-a-time SGD on the weighted three-term loss, log-space learning rate."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .labels import LAMBDA_OFF, LAMBDA_SCL, OFFSET_CUTOFF, focal_loss, offset_loss, scale_loss, total_loss
from .model import SiameseModel, head_forward
from .synth import AnnotatedSequence, TrainingPair, sample_training_pair
from .tensor import Graph, ShapeError, Tensor


class TrainingError(RuntimeError):
    def __init__(self, message: str, epoch: int | None = None, pair: int | None = None):
        super().__init__(message)
        self.epoch = epoch
        self.pair = pair


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    pairs_per_epoch: int = 200
    lr_start: float = 1e-3
    lr_end: float = 1e-6
    lambda_off: float = LAMBDA_OFF
    lambda_scl: float = LAMBDA_SCL
    offset_cutoff: float = OFFSET_CUTOFF
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.pairs_per_epoch < 1:
            raise ValueError("epochs and pairs_per_epoch must be ≥ 1")
        if not self.lr_start >= self.lr_end > 0:
            raise ValueError(f"need lr_start ≥ lr_end > 0, got {self.lr_start}, {self.lr_end}")
        if self.seed < 0:
            raise ValueError("seed must be unsigned")


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    if not 0 <= epoch < config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs})")
    if config.epochs == 1:
        return config.lr_start
    ratio = config.lr_end / config.lr_start
    return config.lr_start * ratio ** (epoch / (config.epochs - 1))


def sgd_step(params: dict[str, Tensor], grads: dict[str, np.ndarray | None], lr: float) -> dict[str, Tensor]:
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = p
            continue
        g = np.asarray(g)
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        out[name] = Tensor(p.data - lr * g, requires_grad=p.requires_grad, name=p.name)
    return out


def pair_loss(model: SiameseModel, pair: TrainingPair, config: TrainConfig):
    """Forward one pair; returns (total, cls, off, scl) tensors. Call inside a Graph."""
    z = model.features(pair.exemplar)
    x = model.features(pair.instance)
    out = head_forward(model.params, model.correlate(z, x))
    cls = focal_loss(out.score, pair.targets.score_label)
    off = offset_loss(out.offset, pair.targets)
    scl = scale_loss(out.size, pair.targets)
    total = total_loss(cls, off, scl, config.lambda_off, config.lambda_scl, config.offset_cutoff)
    return total, cls, off, scl


def train_step(model: SiameseModel, pair: TrainingPair, config: TrainConfig) -> tuple[float, dict[str, np.ndarray]]:
    for p in model.params.values():
        p.grad = None
    with Graph() as graph:
        total, *_ = pair_loss(model, pair, config)
    value = total.item()
    graph.backward(total)
    grads = {name: p.grad for name, p in model.params.items()}
    return value, grads


def train(
    model: SiameseModel,
    dataset: Sequence[AnnotatedSequence],
    config: TrainConfig,
    progress: Callable[[int, float, float], None] | None = None,
) -> tuple[dict[str, Tensor], list[float]]:
    if not dataset:
        raise ValueError("dataset is empty")
    rng = np.random.default_rng(config.seed)
    history = []
    for epoch in range(config.epochs):
        lr = lr_schedule(epoch, config)
        total = 0.0
        for k in range(config.pairs_per_epoch):
            seq = dataset[int(rng.integers(len(dataset)))]
            pair = sample_training_pair(seq, rng, stride=model.stride, score_size=model.score_size,
                                        map_origin=model.map_origin)
            try:
                value, grads = train_step(model, pair, config)
            except ShapeError:
                raise
            except ValueError as exc:  # e.g. a saturated or NaN score reaching the focal loss
                raise TrainingError(f"numerical failure at epoch {epoch}, pair {k}: {exc}", epoch, k) from None
            if not math.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads.values() if g is not None):
                raise TrainingError(f"non-finite loss at epoch {epoch}, pair {k}", epoch, k)
            model = model.with_params(sgd_step(model.params, grads, lr))
            total += value
        mean = total / config.pairs_per_epoch
        history.append(mean)
        if progress is not None:
            progress(epoch, lr, mean)
    return model.params, history


def write_history(path: str | Path, history: Sequence[float]) -> None:
    lines = ["epoch,mean_loss\n"] + [f"{i},{v!r}\n" for i, v in enumerate(history)]
    Path(path).write_text("".join(lines))


def read_history(path: str | Path) -> list[float]:
    rows = Path(path).read_text().splitlines()[1:]
    return [float(r.split(",")[1]) for r in rows if r.strip()]
