"""Deterministic synthetic tracking sequences and their on-disk format.

A sequence directory holds ``000000.ppm``, ``000001.ppm``, ... (binary P6,
maxval 255), ``groundtruth.txt`` with one ``x y w h`` line per frame
(top-left corner, decimal text), and optionally ``config.txt``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .backbone import EXEMPLAR_SIZE, INSTANCE_SIZE
from .labels import BBox, HeadTargets, make_targets
from .tensor import Tensor
from .tracker import CropGeometry, Frame, crop_geometry, resample

MAX_GAP = 50
MAX_JITTER = 32.0
# Truth coordinates live on a dyadic grid so x = cx - w/2 round-trips exactly.
_QUANTUM = 1.0 / 256.0


class ConfigError(ValueError):
    pass


class SequenceFormatError(ValueError):
    pass


@dataclass(frozen=True)
class SequenceConfig:
    frames: int = 100
    frame_size: tuple[int, int] = (320, 240)
    target_size_range: tuple[float, float] = (24.0, 48.0)
    velocity_range: float = 3.0
    scale_drift: float = 0.01
    distractor_count: int = 1
    noise_sigma: float = 4.0
    seed: int = 0

    def __post_init__(self):
        w, h = self.frame_size
        lo, hi = self.target_size_range
        if self.frames < 1:
            raise ConfigError("frames must be ≥ 1")
        if w < 1 or h < 1:
            raise ConfigError(f"frame_size must be positive, got {w}x{h}")
        if not 2.0 <= lo <= hi:
            raise ConfigError(f"target_size_range must satisfy 2 ≤ min ≤ max, got {lo}..{hi}")
        if hi > min(w, h):
            raise ConfigError(f"target up to {hi}px cannot fit inside a {w}x{h} frame")
        if not 0.0 <= self.scale_drift <= 0.1:
            raise ConfigError(f"scale_drift must lie in [0, 0.1], got {self.scale_drift}")
        if self.velocity_range < 0 or self.noise_sigma < 0 or self.distractor_count < 0:
            raise ConfigError("velocity_range, noise_sigma and distractor_count must be non-negative")
        if self.seed < 0:
            raise ConfigError("seed must be unsigned")


_CONFIG_KEYS = {
    "frames": ("frames", int),
    "width": ("frame_size", 0),
    "height": ("frame_size", 1),
    "target_min": ("target_size_range", 0),
    "target_max": ("target_size_range", 1),
    "velocity_range": ("velocity_range", float),
    "scale_drift": ("scale_drift", float),
    "distractor_count": ("distractor_count", int),
    "noise_sigma": ("noise_sigma", float),
    "seed": ("seed", int),
}


def parse_kv(text: str, source: str = "config") -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        out[key.strip()] = value.strip()
    return out


def config_from_kv(kv: dict[str, str], extra_keys: tuple[str, ...] = ()) -> SequenceConfig:
    base = asdict(SequenceConfig())
    size = list(base["frame_size"])
    sizes = list(base["target_size_range"])
    values = {}
    for key, raw in kv.items():
        if key in extra_keys:
            continue
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        name, kind = _CONFIG_KEYS[key]
        try:
            if name == "frame_size":
                size[kind] = int(raw)
            elif name == "target_size_range":
                sizes[kind] = float(raw)
            else:
                values[name] = kind(raw)
        except ValueError:
            raise ConfigError(f"bad value for {key!r}: {raw!r}") from None
    return SequenceConfig(frame_size=tuple(size), target_size_range=tuple(sizes), **values)


def config_to_text(cfg: SequenceConfig) -> str:
    w, h = cfg.frame_size
    lo, hi = cfg.target_size_range
    rows = [
        ("frames", cfg.frames),
        ("width", w),
        ("height", h),
        ("target_min", repr(float(lo))),
        ("target_max", repr(float(hi))),
        ("velocity_range", repr(float(cfg.velocity_range))),
        ("scale_drift", repr(float(cfg.scale_drift))),
        ("distractor_count", cfg.distractor_count),
        ("noise_sigma", repr(float(cfg.noise_sigma))),
        ("seed", cfg.seed),
    ]
    return "".join(f"{k}={v}\n" for k, v in rows)


@dataclass
class AnnotatedSequence:
    frames: list[Frame]
    truth: list[BBox]
    config: SequenceConfig | None = None

    def __post_init__(self):
        if len(self.frames) != len(self.truth):
            raise SequenceFormatError(f"{len(self.frames)} frames but {len(self.truth)} truth boxes")

    def __len__(self) -> int:
        return len(self.frames)

    def __eq__(self, other):
        if not isinstance(other, AnnotatedSequence):
            return NotImplemented
        return self.frames == other.frames and self.truth == other.truth


# ----------------------------------------------------------------- generator


def _quantize(v: float) -> float:
    return round(v / _QUANTUM) * _QUANTUM


def _smooth_background(rng: np.random.Generator, width: int, height: int) -> np.ndarray:
    cell = 16
    gh, gw = height // cell + 2, width // cell + 2
    coarse = rng.uniform(70.0, 180.0, size=(gh, gw, 3))
    ys = (np.arange(height) + 0.5) / cell
    xs = (np.arange(width) + 0.5) / cell
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    ty = (ys - y0)[:, None, None]
    tx = (xs - x0)[None, :, None]
    a = coarse[y0][:, x0]
    b = coarse[y0][:, x0 + 1]
    c = coarse[y0 + 1][:, x0]
    d = coarse[y0 + 1][:, x0 + 1]
    smooth = (a * (1 - tx) + b * tx) * (1 - ty) + (c * (1 - tx) + d * tx) * ty
    return smooth + rng.uniform(-12.0, 12.0, size=(height, width, 3))


def _texture(rng: np.random.Generator) -> np.ndarray:
    n = int(rng.integers(3, 6))
    return rng.uniform(0.0, 255.0, size=(n, n, 3))


class _Mover:
    """Box with a bounded random-walk velocity and multiplicative size drift."""

    def __init__(self, rng, cfg: SequenceConfig):
        W, H = cfg.frame_size
        lo, hi = cfg.target_size_range
        self.rng = rng
        self.cfg = cfg
        self.w = float(rng.uniform(lo, hi))
        self.h = float(rng.uniform(lo, hi))
        self.cx = float(rng.uniform(self.w / 2, W - self.w / 2))
        self.cy = float(rng.uniform(self.h / 2, H - self.h / 2))
        vmax = cfg.velocity_range
        angle = rng.uniform(0.0, 2 * math.pi)
        speed = rng.uniform(0.0, vmax)
        self.vx, self.vy = speed * math.cos(angle), speed * math.sin(angle)
        self.texture = _texture(rng)
        self._snap()

    def _snap(self):
        W, H = self.cfg.frame_size
        self.w, self.h = _quantize(self.w), _quantize(self.h)
        self.cx = min(max(_quantize(self.cx), self.w / 2), W - self.w / 2)
        self.cy = min(max(_quantize(self.cy), self.h / 2), H - self.h / 2)

    def step(self):
        cfg = self.cfg
        W, H = cfg.frame_size
        lo, hi = cfg.target_size_range
        vmax = cfg.velocity_range
        # unconditional draws keep the random stream independent of the branch taken
        dv = self.rng.normal(0.0, vmax / 4.0 if vmax > 0 else 0.0, size=2)
        u = self.rng.uniform(-1.0, 1.0) * math.log1p(cfg.scale_drift)

        self.vx += dv[0]
        self.vy += dv[1]
        # stay under vmax with margin for quantization of the position
        limit = max(vmax - 2 * _QUANTUM, 0.0)
        speed = math.hypot(self.vx, self.vy)
        if speed > limit:
            k = limit / speed if speed > 0 else 0.0
            self.vx *= k
            self.vy *= k

        f = math.exp(u)
        nw, nh = self.w * f, self.h * f
        fits = (lo <= nw <= hi and lo <= nh <= hi
                and nw / 2 <= self.cx <= W - nw / 2 and nh / 2 <= self.cy <= H - nh / 2)
        if fits:
            self.w, self.h = _quantize(nw), _quantize(nh)

        nx, ny = self.cx + self.vx, self.cy + self.vy
        if not self.w / 2 <= nx <= W - self.w / 2:
            self.vx = -self.vx
            nx = min(max(nx, self.w / 2), W - self.w / 2)
        if not self.h / 2 <= ny <= H - self.h / 2:
            self.vy = -self.vy
            ny = min(max(ny, self.h / 2), H - self.h / 2)
        self.cx, self.cy = _quantize(nx), _quantize(ny)
        # quantization may nudge past an edge
        self.cx = min(max(self.cx, self.w / 2), W - self.w / 2)
        self.cy = min(max(self.cy, self.h / 2), H - self.h / 2)

    @property
    def box(self) -> BBox:
        return BBox(self.cx, self.cy, self.w, self.h)

    def paint(self, canvas: np.ndarray):
        H, W = canvas.shape[:2]
        x1, y1 = self.cx - self.w / 2, self.cy - self.h / 2
        cols = np.arange(max(0, math.floor(x1)), min(W, math.ceil(x1 + self.w) + 1))
        rows = np.arange(max(0, math.floor(y1)), min(H, math.ceil(y1 + self.h) + 1))
        cols = cols[(cols + 0.5 >= x1) & (cols + 0.5 < x1 + self.w)]
        rows = rows[(rows + 0.5 >= y1) & (rows + 0.5 < y1 + self.h)]
        if not len(cols) or not len(rows):
            return
        n = self.texture.shape[0]
        tu = np.clip(((cols + 0.5 - x1) / self.w * n).astype(int), 0, n - 1)
        tv = np.clip(((rows + 0.5 - y1) / self.h * n).astype(int), 0, n - 1)
        canvas[rows[:, None], cols[None, :]] = self.texture[tv[:, None], tu[None, :]]


def generate_sequence(config: SequenceConfig) -> AnnotatedSequence:
    rng = np.random.default_rng(config.seed)
    W, H = config.frame_size
    background = _smooth_background(rng, W, H)
    target = _Mover(rng, config)
    distractors = [_Mover(rng, config) for _ in range(config.distractor_count)]

    frames, truth = [], []
    for t in range(config.frames):
        if t:
            target.step()
            for d in distractors:
                d.step()
        canvas = background.copy()
        for d in distractors:
            d.paint(canvas)
        target.paint(canvas)
        if config.noise_sigma > 0:
            canvas = canvas + rng.normal(0.0, config.noise_sigma, size=canvas.shape)
        pixels = np.clip(np.rint(canvas), 0, 255).astype(np.uint8)
        frames.append(Frame(W, H, pixels))
        truth.append(target.box)
    return AnnotatedSequence(frames, truth, config)


# ------------------------------------------------------------ training pairs


@dataclass
class TrainingPair:
    exemplar: Tensor
    instance: Tensor
    targets: HeadTargets
    instance_crop: CropGeometry
    truth: BBox


def sample_training_pair(
    seq: AnnotatedSequence,
    rng: np.random.Generator,
    *,
    stride: int = 8,
    score_size: int = 17,
    map_origin: float = EXEMPLAR_SIZE / 2.0,
    max_gap: int = MAX_GAP,
    max_jitter: float = MAX_JITTER,
    frames: tuple[int, int] | None = None,
    jitter: tuple[float, float] | None = None,
) -> TrainingPair:
    """Exemplar from one frame, off-center instance from another at most ``max_gap`` away.

    ``jitter`` is the target's displacement from the instance-patch center in
    patch pixels.
    """
    n = len(seq)
    if n < 2:
        raise ValueError("need a sequence of at least 2 frames")
    if frames is None:
        i = int(rng.integers(n))
        j = int(np.clip(i + rng.integers(-max_gap, max_gap + 1), 0, n - 1))
    else:
        i, j = frames
    if jitter is None:
        jitter = tuple(float(v) for v in rng.uniform(-max_jitter, max_jitter, size=2))

    zgeom = crop_geometry(seq.truth[i], EXEMPLAR_SIZE)
    exemplar = Tensor(resample(seq.frames[i], zgeom))

    box = seq.truth[j]
    scale = crop_geometry(box, INSTANCE_SIZE).crop_scale
    center = (box.cx - jitter[0] / scale, box.cy - jitter[1] / scale)
    xgeom = crop_geometry(box, INSTANCE_SIZE, center=center)
    instance = Tensor(resample(seq.frames[j], xgeom))

    q = xgeom.frame_to_patch((box.cx, box.cy))
    map_box = BBox(q[0] - map_origin, q[1] - map_origin, box.w * scale, box.h * scale)
    targets = make_targets(map_box, score_size, stride)
    return TrainingPair(exemplar, instance, targets, xgeom, box)


# ------------------------------------------------------------------------ I/O


def parse_ppm_header(data: bytes, name: str = "<ppm>") -> tuple[int, int, int, int]:
    """Return (width, height, maxval, payload offset) of a binary P6 image."""
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise SequenceFormatError(f"{name}: truncated PPM header")
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P6":
        raise SequenceFormatError(f"{name}: not a binary PPM (magic {tokens[0]!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise SequenceFormatError(f"{name}: malformed PPM header") from None
    if width < 1 or height < 1 or maxval != 255:
        raise SequenceFormatError(f"{name}: unsupported PPM geometry {width}x{height} maxval {maxval}")
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise SequenceFormatError(f"{name}: missing whitespace after PPM header")
    return width, height, maxval, pos + 1


def encode_ppm(frame: Frame) -> bytes:
    return b"P6\n%d %d\n255\n" % (frame.width, frame.height) + frame.pixels.tobytes()


def decode_ppm(data: bytes, name: str = "<ppm>") -> Frame:
    width, height, _, offset = parse_ppm_header(data, name)
    expected = 3 * width * height
    payload = data[offset:]
    if len(payload) != expected:
        raise SequenceFormatError(f"{name}: expected {expected} payload bytes, found {len(payload)}")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3).copy()
    return Frame(width, height, pixels)


def write_sequence(seq: AnnotatedSequence, directory: str | Path) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(seq.frames):
        (d / f"{i:06d}.ppm").write_bytes(encode_ppm(frame))
    lines = []
    for b in seq.truth:
        x, y, w, h = b.to_xywh()
        lines.append(f"{x!r} {y!r} {w!r} {h!r}\n")
    (d / "groundtruth.txt").write_text("".join(lines))
    if seq.config is not None:
        (d / "config.txt").write_text(config_to_text(seq.config))


def read_groundtruth(path: str | Path) -> list[BBox]:
    boxes = []
    p = Path(path)
    for lineno, line in enumerate(p.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.replace(",", " ").split()
        if len(parts) != 4:
            raise SequenceFormatError(f"{p}:{lineno}: expected 'x y w h'")
        try:
            boxes.append(BBox.from_xywh(*(float(v) for v in parts)))
        except ValueError as exc:
            raise SequenceFormatError(f"{p}:{lineno}: {exc}") from None
    return boxes


def read_sequence(directory: str | Path) -> AnnotatedSequence:
    d = Path(directory)
    gt_path = d / "groundtruth.txt"
    if not gt_path.is_file():
        raise FileNotFoundError(f"{gt_path} not found")
    truth = read_groundtruth(gt_path)
    paths = sorted(d.glob("[0-9][0-9][0-9][0-9][0-9][0-9].ppm"))
    if len(paths) != len(truth):
        raise SequenceFormatError(f"{gt_path}: {len(truth)} annotations but {len(paths)} frames in {d}")
    for i, p in enumerate(paths):
        if p.name != f"{i:06d}.ppm":
            raise SequenceFormatError(f"{d}: frame files not contiguous, expected {i:06d}.ppm, found {p.name}")
    frames = [decode_ppm(p.read_bytes(), str(p)) for p in paths]
    config = None
    cfg_path = d / "config.txt"
    if cfg_path.is_file():
        config = config_from_kv(parse_kv(cfg_path.read_text(), str(cfg_path)))
    return AnnotatedSequence(frames, truth, config)

