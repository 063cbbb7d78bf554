"""Crop-and-decode inference loop.

Continuous pixel coordinates are used throughout: pixel ``i`` covers
``[i, i + 1)`` and its center is ``i + 0.5``, in frames and patches alike.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from .backbone import EXEMPLAR_SIZE, INSTANCE_SIZE
from .labels import BBox, HeadOutput, make_targets
from .tensor import Tensor

DEFAULT_GAMMA = 0.3
MIN_SIZE = 2.0


@dataclass(eq=False)
class Frame:
    """8-bit RGB image stored as a [height, width, 3] array."""

    width: int
    height: int
    pixels: np.ndarray

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"frame must be non-empty, got {self.width}x{self.height}")
        px = np.asarray(self.pixels)
        if px.dtype != np.uint8:
            raise ValueError(f"frame pixels must be uint8, got {px.dtype}")
        if px.size != 3 * self.width * self.height:
            raise ValueError(f"pixel buffer has {px.size} values, expected {3 * self.width * self.height}")
        self.pixels = px.reshape(self.height, self.width, 3)

    @classmethod
    def from_array(cls, pixels: np.ndarray) -> "Frame":
        h, w = pixels.shape[:2]
        return cls(w, h, pixels)

    def __eq__(self, other):
        if not isinstance(other, Frame):
            return NotImplemented
        return (self.width, self.height) == (other.width, other.height) and np.array_equal(
            self.pixels, other.pixels
        )


@dataclass(frozen=True)
class CropGeometry:
    """Square crop of side ``side`` frame pixels around ``center``, resampled to ``size``."""

    center: tuple[float, float]
    side: float
    size: int

    @property
    def crop_scale(self) -> float:
        return self.size / self.side

    def patch_to_frame(self, q: tuple[float, float]) -> tuple[float, float]:
        s = self.crop_scale
        return (self.center[0] + (q[0] - self.size / 2.0) / s, self.center[1] + (q[1] - self.size / 2.0) / s)

    def frame_to_patch(self, p: tuple[float, float]) -> tuple[float, float]:
        s = self.crop_scale
        return (self.size / 2.0 + (p[0] - self.center[0]) * s, self.size / 2.0 + (p[1] - self.center[1]) * s)

    def map_origin_frame(self, map_origin: float) -> tuple[float, float]:
        """Frame position of score-map coordinate (0, 0)."""
        return self.patch_to_frame((map_origin, map_origin))


def context_side(w: float, h: float) -> float:
    """Side of the square with the same area as the context-padded box."""
    p = (w + h) / 2.0
    return math.sqrt((w + p) * (h + p))


def crop_geometry(bbox: BBox, size: int, center: tuple[float, float] | None = None,
                  exemplar_size: int = EXEMPLAR_SIZE) -> CropGeometry:
    if not (bbox.w > 0 and bbox.h > 0):
        raise ValueError(f"degenerate box {bbox}")
    side = context_side(bbox.w, bbox.h) * size / exemplar_size
    c = (bbox.cx, bbox.cy) if center is None else center
    return CropGeometry((float(c[0]), float(c[1])), side, size)


def resample(frame: Frame, geom: CropGeometry) -> np.ndarray:
    """Bilinear crop as a [3, size, size] float array; outside pixels read as the frame mean."""
    a = geom.size
    s = geom.crop_scale
    q = np.arange(a) + 0.5
    # pixel-index coordinates (pixel centers at integers)
    fx = geom.center[0] + (q - a / 2.0) / s - 0.5
    fy = geom.center[1] + (q - a / 2.0) / s - 0.5
    x0 = np.floor(fx).astype(np.int64)
    y0 = np.floor(fy).astype(np.int64)
    tx = (fx - x0)[None, :, None]
    ty = (fy - y0)[:, None, None]
    img = frame.pixels.astype(np.float64)
    mean = img.mean(axis=(0, 1))

    def gather(yi, xi):
        vy = (yi >= 0) & (yi < frame.height)
        vx = (xi >= 0) & (xi < frame.width)
        vals = img[np.clip(yi, 0, frame.height - 1)[:, None], np.clip(xi, 0, frame.width - 1)[None, :]]
        inside = (vy[:, None] & vx[None, :])[..., None]
        return np.where(inside, vals, mean)

    top = gather(y0, x0) * (1 - tx) + gather(y0, x0 + 1) * tx
    bottom = gather(y0 + 1, x0) * (1 - tx) + gather(y0 + 1, x0 + 1) * tx
    out = top * (1 - ty) + bottom * ty
    return out.transpose(2, 0, 1)


def crop_region(frame: Frame, bbox: BBox, size: int, center: tuple[float, float] | None = None
                ) -> tuple[Tensor, float]:
    geom = crop_geometry(bbox, size, center)
    return Tensor(resample(frame, geom)), geom.crop_scale


# ------------------------------------------------------------------- decoding


def hanning_window(m: int) -> np.ndarray:
    return np.outer(np.hanning(m), np.hanning(m))


def apply_hanning(score, gamma: float) -> np.ndarray:
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    s = score.data if isinstance(score, Tensor) else np.asarray(score, dtype=np.float64)
    if gamma == 0.0:
        return s.copy()
    return (1.0 - gamma) * s + gamma * hanning_window(s.shape[-1])


def _arr(t) -> np.ndarray:
    return t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)


def decode(score, offset, size, stride: int, crop_scale: float = 1.0,
           crop_origin: tuple[float, float] = (0.0, 0.0)) -> BBox:
    """Box at the score peak; with the defaults the result is in map coordinates."""
    sc = _arr(score).reshape(_arr(score).shape[-2:])
    m = sc.shape[-1]
    peak = int(np.argmax(sc))
    y, x = divmod(peak, m)
    off = _arr(offset)
    sz = _arr(size)
    mx = stride * (x + off[0, y, x])
    my = stride * (y + off[1, y, x])
    w = math.exp(sz[0, y, x])
    h = math.exp(sz[1, y, x])
    return BBox(crop_origin[0] + mx / crop_scale, crop_origin[1] + my / crop_scale, w / crop_scale, h / crop_scale)


# -------------------------------------------------------------------- tracking


class TrackerModel(Protocol):
    exemplar_size: int
    instance_size: int
    stride: int
    score_size: int
    map_origin: float

    def embed(self, patch: Tensor) -> Tensor: ...

    def respond(self, exemplar_feat: Tensor, patch: Tensor, crop: CropGeometry) -> HeadOutput: ...


@dataclass
class TrackerConfig:
    gamma: float = DEFAULT_GAMMA

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")


@dataclass
class TrackerState:
    model: TrackerModel
    exemplar_features: Tensor
    current_bbox: BBox
    crop_scale: float
    config: TrackerConfig = field(default_factory=TrackerConfig)
    frame_index: int = 0


def init(frame: Frame, bbox: BBox, model: TrackerModel, config: TrackerConfig | None = None) -> TrackerState:
    geom = crop_geometry(bbox, model.exemplar_size)
    patch = Tensor(resample(frame, geom))
    feats = model.embed(patch)
    return TrackerState(model, feats, bbox, geom.crop_scale, config or TrackerConfig())


def _sanitize(box: BBox, frame: Frame) -> BBox:
    w, h = box.w, box.h
    if w < MIN_SIZE or h < MIN_SIZE:
        warnings.warn(f"decoded size {w:.3f}x{h:.3f} below {MIN_SIZE}px floor; clamping", RuntimeWarning)
        w, h = max(w, MIN_SIZE), max(h, MIN_SIZE)
    w, h = min(w, frame.width), min(h, frame.height)
    cx = min(max(box.cx, 0.0), float(frame.width))
    cy = min(max(box.cy, 0.0), float(frame.height))
    return BBox(cx, cy, w, h)


def track_step(state: TrackerState, frame: Frame) -> BBox:
    model = state.model
    geom = crop_geometry(state.current_bbox, model.instance_size)
    patch = Tensor(resample(frame, geom))
    out = model.respond(state.exemplar_features, patch, geom)
    windowed = apply_hanning(out.score, state.config.gamma)
    box = decode(windowed, out.offset, out.size, model.stride, geom.crop_scale,
                 geom.map_origin_frame(model.map_origin))
    box = _sanitize(box, frame)
    state.current_bbox = box
    state.crop_scale = geom.crop_scale
    state.frame_index += 1
    return box


def track_sequence(frames, init_box: BBox, model: TrackerModel, config: TrackerConfig | None = None) -> list[BBox]:
    state = init(frames[0], init_box, model, config)
    boxes = [init_box]
    for frame in frames[1:]:
        boxes.append(track_step(state, frame))
    return boxes


@dataclass
class OracleModel:
    """Head stub that fabricates perfect outputs from groundtruth, bypassing the network.

    ``respond`` call ``k`` after ``embed`` is answered with ``truth[k]``.
    """

    truth: list[BBox]
    stride: int = 8
    score_size: int = 17
    map_origin: float = EXEMPLAR_SIZE / 2.0
    exemplar_size: int = EXEMPLAR_SIZE
    instance_size: int = INSTANCE_SIZE
    calls: int = 0

    def embed(self, patch: Tensor) -> Tensor:
        self.calls = 0
        return Tensor(np.zeros((1, 1, 1)))

    def respond(self, exemplar_feat: Tensor, patch: Tensor, crop: CropGeometry) -> HeadOutput:
        self.calls += 1
        truth = self.truth[self.calls]
        origin = crop.map_origin_frame(self.map_origin)
        s = crop.crop_scale
        extent = self.score_size * self.stride
        mx = min(max((truth.cx - origin[0]) * s, 0.0), extent - 1e-6)
        my = min(max((truth.cy - origin[1]) * s, 0.0), extent - 1e-6)
        targets = make_targets(BBox(mx, my, truth.w * s, truth.h * s), self.score_size, self.stride)
        eps = 1e-6
        score = np.where(targets.score_label == 1.0, 1.0 - eps, eps)
        m = self.score_size
        offset = np.broadcast_to(np.asarray(targets.offset_target)[:, None, None], (2, m, m))
        size = np.broadcast_to(np.asarray(targets.scale_target)[:, None, None], (2, m, m))
        return HeadOutput(Tensor(score), Tensor(offset), Tensor(size))


# --------------------------------------------------------------------- log IO


def write_results(path: str | Path, boxes: list[BBox]) -> None:
    lines = [f"{i} {b.cx:.6f} {b.cy:.6f} {b.w:.6f} {b.h:.6f}\n" for i, b in enumerate(boxes)]
    Path(path).write_text("".join(lines))


def read_results(path: str | Path) -> list[BBox]:
    boxes = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 5:
            raise ValueError(f"{path}:{lineno}: expected 'frame_index cx cy w h'")
        _, cx, cy, w, h = parts
        boxes.append(BBox(float(cx), float(cy), float(w), float(h)))
    return boxes
