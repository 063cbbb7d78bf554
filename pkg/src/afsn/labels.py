"""Training targets and loss terms for the anchor-free head.

Coordinates handed to these functions are *map coordinates*: instance-patch
pixels measured from the point that score-map cell (0, 0) looks at, so cell
``(x, y)`` sits exactly at ``(x * stride, y * stride)``. The tracker's crop
geometry converts between map coordinates and frame pixels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, _emit, add, scale

FOCAL_ALPHA = 2
FOCAL_BETA = 4
LAMBDA_OFF = 0.1
LAMBDA_SCL = 4.0
OFFSET_CUTOFF = 1e-8

# Largest float below 1: keeps every non-center label cell strictly under the peak.
_BELOW_ONE = float(np.nextafter(1.0, 0.0))


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box given by its center and size."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box size must be positive, got w={self.w}, h={self.h}")
        if not all(math.isfinite(v) for v in (self.cx, self.cy, self.w, self.h)):
            raise ValueError(f"box has non-finite component: {self}")

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> "BBox":
        return cls(x + w / 2.0, y + h / 2.0, w, h)

    def to_xywh(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.w, self.h)

    @property
    def x1(self) -> float:
        return self.cx - self.w / 2.0

    @property
    def y1(self) -> float:
        return self.cy - self.h / 2.0

    @property
    def x2(self) -> float:
        return self.cx + self.w / 2.0

    @property
    def y2(self) -> float:
        return self.cy + self.h / 2.0


@dataclass(frozen=True)
class HeadTargets:
    score_label: np.ndarray  # [1, M, M]
    offset_target: tuple[float, float]
    scale_target: tuple[float, float]
    center_cell: tuple[int, int]

    @property
    def map_size(self) -> int:
        return self.score_label.shape[-1]


@dataclass
class HeadOutput:
    score: Tensor  # [1, M, M], post-sigmoid
    offset: Tensor  # [2, M, M]
    size: Tensor  # [2, M, M], log width / log height


def _check_coverage(cx: float, cy: float, map_size: int, stride: int) -> None:
    extent = map_size * stride
    if not (0.0 <= cx < extent and 0.0 <= cy < extent):
        raise ValueError(
            f"center ({cx:.3f}, {cy:.3f}) outside the region covered by a {map_size}x{map_size} "
            f"map at stride {stride} (0 <= c < {extent})"
        )


def offset_target(center: tuple[float, float], stride: int) -> tuple[tuple[int, int], tuple[float, float]]:
    """Quantize a center to its grid cell and the fractional remainder in [0, 1)."""
    cells = []
    fracs = []
    for c in center:
        q = c / stride
        cell = math.floor(q)
        frac = q - cell
        if frac >= 1.0:  # q just below an integer can round up
            cell, frac = cell + 1, 0.0
        cells.append(cell)
        fracs.append(frac)
    return (cells[0], cells[1]), (fracs[0], fracs[1])


def scale_target(box: BBox) -> tuple[float, float]:
    if not (box.w > 0 and box.h > 0):
        raise ValueError("scale target needs a positive box size")
    return math.log(box.w), math.log(box.h)


def gaussian_label(box: BBox, map_size: int, stride: int) -> np.ndarray:
    """Peak-normalized Gaussian score label with sigma = size / 6.

    The cell holding the box center (as quantized by :func:`offset_target`)
    is set to exactly 1; every other cell is strictly below 1.
    """
    _check_coverage(box.cx, box.cy, map_size, stride)
    s1, s2 = box.w / 6.0, box.h / 6.0
    grid = np.arange(map_size, dtype=np.float64) * stride
    ex = ((grid[None, :] - box.cx) / s1) ** 2 + ((grid[:, None] - box.cy) / s2) ** 2
    label = np.exp(-0.5 * ex)
    label = np.minimum(label, _BELOW_ONE)
    (cx, cy), _ = offset_target((box.cx, box.cy), stride)
    label[cy, cx] = 1.0
    return label[None]


def make_targets(box: BBox, map_size: int, stride: int) -> HeadTargets:
    cell, frac = offset_target((box.cx, box.cy), stride)
    return HeadTargets(
        score_label=gaussian_label(box, map_size, stride),
        offset_target=frac,
        scale_target=scale_target(box),
        center_cell=cell,
    )


# ------------------------------------------------------------------- losses


def _as_array(label) -> np.ndarray:
    return label.data if isinstance(label, Tensor) else np.asarray(label, dtype=np.float64)


def focal_loss(pred: Tensor, label, alpha: int = FOCAL_ALPHA, beta: int = FOCAL_BETA) -> Tensor:
    """Penalty-reduced pixel-wise focal loss, normalized by the count of label-1 cells."""
    y = _as_array(label)
    p = pred.data
    if p.shape != y.shape:
        raise ShapeError(f"prediction {p.shape} and label {y.shape} differ")
    if not (np.all(p > 0.0) and np.all(p < 1.0)):
        raise ValueError("focal_loss needs predictions strictly inside (0, 1); apply sigmoid first")
    pos = y == 1.0
    n_pos = max(int(pos.sum()), 1)
    neg_w = (1.0 - y) ** beta
    log_p = np.log(p)
    log_q = np.log1p(-p)
    terms = np.where(pos, (1.0 - p) ** alpha * log_p, neg_w * p**alpha * log_q)
    value = -terms.sum() / n_pos

    def rule(g):
        d_pos = -alpha * (1.0 - p) ** (alpha - 1) * log_p + (1.0 - p) ** alpha / p
        d_neg = neg_w * (alpha * p ** (alpha - 1) * log_q - p**alpha / (1.0 - p))
        return (-g * np.where(pos, d_pos, d_neg) / n_pos,)

    return _emit(np.asarray(value), (pred,), rule)


def offset_loss(pred_offset: Tensor, targets: HeadTargets) -> Tensor:
    """Mean over cells of the L1 distance to the shared fractional center offset."""
    d = pred_offset.data
    if d.ndim != 3 or d.shape[0] != 2 or d.shape[1:] != targets.score_label.shape[1:]:
        raise ShapeError(f"offset prediction must be [2,M,M] matching the label, got {d.shape}")
    tgt = np.asarray(targets.offset_target, dtype=np.float64)[:, None, None]
    diff = d - tgt
    cells = d.shape[1] * d.shape[2]
    value = np.abs(diff).sum() / cells
    return _emit(np.asarray(value), (pred_offset,), lambda g: (g * np.sign(diff) / cells,))


def scale_loss(pred_size: Tensor, targets: HeadTargets) -> Tensor:
    """L1 distance of the log-size prediction, read only at the center cell."""
    d = pred_size.data
    if d.ndim != 3 or d.shape[0] != 2 or d.shape[1:] != targets.score_label.shape[1:]:
        raise ShapeError(f"size prediction must be [2,M,M] matching the label, got {d.shape}")
    cx, cy = targets.center_cell
    diff = d[:, cy, cx] - np.asarray(targets.scale_target, dtype=np.float64)
    value = np.abs(diff).sum()

    def rule(g):
        grad = np.zeros(d.shape)
        grad[:, cy, cx] = g * np.sign(diff)
        return (grad,)

    return _emit(np.asarray(value), (pred_size,), rule)


def total_loss(cls, off, scl, lambda_off: float = LAMBDA_OFF, lambda_scl: float = LAMBDA_SCL,
               offset_cutoff: float = OFFSET_CUTOFF):
    """Weighted sum of the three terms; an offset term below the cutoff counts as zero.

    Accepts plain floats (returns a float) or scalar tensors (returns a tensor).
    """
    if not any(isinstance(v, Tensor) for v in (cls, off, scl)):
        off_term = 0.0 if off < offset_cutoff else lambda_off * off
        return cls + off_term + lambda_scl * scl
    cls, off, scl = (v if isinstance(v, Tensor) else Tensor(v) for v in (cls, off, scl))
    out = cls
    if off.item() >= offset_cutoff:
        out = add(out, scale(off, lambda_off))
    return add(out, scale(scl, lambda_scl))
