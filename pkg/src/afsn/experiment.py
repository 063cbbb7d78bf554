"""Desk-scale train / held-out-track experiment on synthetic sequences."""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import Callable

from .backbone import reference_spec
from .metrics import EvalReport, evaluate_ope, mean_report
from .model import SiameseModel, build_model
from .synth import AnnotatedSequence, SequenceConfig, generate_sequence
from .tracker import TrackerConfig, track_sequence
from .train import TrainConfig, train

REFERENCE_SEQUENCE = SequenceConfig(
    frames=100,
    frame_size=(320, 240),
    target_size_range=(24.0, 48.0),
    velocity_range=3.0,
    scale_drift=0.01,
    distractor_count=1,
    noise_sigma=4.0,
)
TRAIN_SEEDS = tuple(range(1000, 1020))
HELDOUT_SEEDS = tuple(range(2000, 2010))


def make_sequences(seeds, base: SequenceConfig = REFERENCE_SEQUENCE) -> list[AnnotatedSequence]:
    return [generate_sequence(replace(base, seed=s)) for s in seeds]


def evaluate_tracker(model, sequences, gamma: float = TrackerConfig.gamma) -> EvalReport:
    reports = []
    for seq in sequences:
        boxes = track_sequence(seq.frames, seq.truth[0], model, TrackerConfig(gamma))
        reports.append(evaluate_ope(boxes, seq.truth))
    return mean_report(reports)


def static_baseline(sequences) -> EvalReport:
    return mean_report([evaluate_ope([s.truth[0]] * len(s), s.truth) for s in sequences])


@dataclass
class DeskResult:
    history: list[float]
    report: EvalReport
    baseline: EvalReport
    model: SiameseModel
    seconds: float


def run_desk_experiment(
    epochs: int = 50,
    pairs_per_epoch: int = 200,
    seed: int = 0,
    progress: Callable[[int, float, float], None] | None = None,
) -> DeskResult:
    start = time.perf_counter()
    train_set = make_sequences(TRAIN_SEEDS)
    heldout = make_sequences(HELDOUT_SEEDS)
    model = build_model(reference_spec(), seed)
    config = TrainConfig(epochs=epochs, pairs_per_epoch=pairs_per_epoch, seed=seed)
    params, history = train(model, train_set, config, progress)
    trained = model.with_params(params)
    report = evaluate_tracker(trained, heldout)
    return DeskResult(history, report, static_baseline(heldout), trained, time.perf_counter() - start)
