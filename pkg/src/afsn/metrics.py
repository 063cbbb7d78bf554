"""One-pass evaluation: precision plot, success plot and its AUC, failure count."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .labels import BBox

PRECISION_THRESHOLDS = tuple(float(t) for t in range(51))
SUCCESS_THRESHOLDS = tuple(i / 20 for i in range(21))


def iou(a: BBox, b: BBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    # areas from the same corners as the intersection, so iou(a, a) == 1 exactly
    union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter
    return min(max(inter / union, 0.0), 1.0)


def center_error(a: BBox, b: BBox) -> float:
    return math.hypot(a.cx - b.cx, a.cy - b.cy)


@dataclass(frozen=True)
class EvalReport:
    precision_curve: tuple[tuple[float, float], ...]
    success_curve: tuple[tuple[float, float], ...]
    auc: float
    precision_at_20: float
    failures: int
    frames: int

    def precision_at(self, threshold: float) -> float:
        return dict(self.precision_curve)[float(threshold)]

    def to_text(self) -> str:
        return (
            f"frames={self.frames}\n"
            f"auc={self.auc:.6f}\n"
            f"precision_at_20={self.precision_at_20:.6f}\n"
            f"failures={self.failures}\n"
        )

    def write(self, prefix: str | Path) -> list[Path]:
        prefix = Path(prefix)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        written = []
        for tag, head, curve in (
            ("precision", "threshold_px,fraction", self.precision_curve),
            ("success", "iou_threshold,fraction", self.success_curve),
        ):
            path = prefix.with_name(f"{prefix.name}_{tag}.csv")
            path.write_text(head + "\n" + "".join(f"{t:g},{f:.6f}\n" for t, f in curve))
            written.append(path)
        report = prefix.with_name(f"{prefix.name}_report.txt")
        report.write_text(self.to_text())
        written.append(report)
        return written


def evaluate_ope(pred: Sequence[BBox], truth: Sequence[BBox]) -> EvalReport:
    if len(pred) != len(truth):
        raise ValueError(f"{len(pred)} predictions for {len(truth)} groundtruth frames")
    if not truth:
        raise ValueError("need at least one frame")
    dist = np.array([center_error(p, t) for p, t in zip(pred, truth)])
    overlap = np.array([iou(p, t) for p, t in zip(pred, truth)])
    precision = tuple((t, float(np.mean(dist <= t))) for t in PRECISION_THRESHOLDS)
    success = tuple((t, float(np.mean(overlap > t))) for t in SUCCESS_THRESHOLDS)
    return EvalReport(
        precision_curve=precision,
        success_curve=success,
        auc=float(np.mean([f for _, f in success])),
        precision_at_20=dict(precision)[20.0],
        failures=int(np.sum(overlap == 0.0)),
        frames=len(truth),
    )


def mean_report(reports: Sequence[EvalReport]) -> EvalReport:
    """Average curves over sequences, each sequence weighted equally."""
    if not reports:
        raise ValueError("no reports to average")
    def avg(curves):
        thresholds = [t for t, _ in curves[0]]
        return tuple((t, float(np.mean([c[i][1] for c in curves]))) for i, t in enumerate(thresholds))

    precision = avg([r.precision_curve for r in reports])
    success = avg([r.success_curve for r in reports])
    return EvalReport(
        precision_curve=precision,
        success_curve=success,
        auc=float(np.mean([f for _, f in success])),
        precision_at_20=dict(precision)[20.0],
        failures=sum(r.failures for r in reports),
        frames=sum(r.frames for r in reports),
    )
