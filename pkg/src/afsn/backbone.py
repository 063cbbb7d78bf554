"""Line-based backbone description language, stride/receptive-field analysis,
parameter construction and the shared-weight forward pass.

Grammar, one layer per line (blank lines and ``#`` comments ignored)::

    conv k=<int> s=<int> c=<int> g=<int> act=<relu|none>
    maxpool k=<int> s=<int>
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import Tensor, conv2d, maxpool2d, relu

EXEMPLAR_SIZE = 127
INSTANCE_SIZE = 255

PREFERRED_STRIDE = (7, 9)
PREFERRED_RF_FRACTION = (0.70, 0.80)
PREFERRED_DEEP_CHANNELS = 256

# Stride 8 and receptive field 95 (75% of the exemplar) with grouped middle
# layers and 256 output channels. Every strided layer divides its input
# exactly for both 127 and 255 inputs, so no border pixels are dropped.
REFERENCE_AFSN = """\
# reference anchor-free Siamese backbone
conv k=7 s=2 c=8 g=1 act=relu
conv k=5 s=2 c=16 g=1 act=relu
conv k=5 s=2 c=32 g=2 act=relu
conv k=3 s=1 c=64 g=2 act=relu
conv k=3 s=1 c=64 g=2 act=relu
conv k=3 s=1 c=64 g=4 act=relu
conv k=3 s=1 c=256 g=4 act=none
"""


class BackboneError(ValueError):
    def __init__(self, message: str, line: int | None = None, layer: int | None = None):
        prefix = f"line {line}: " if line is not None else ""
        if layer is not None:
            prefix += f"layer {layer}: "
        super().__init__(prefix + message)
        self.line = line
        self.layer = layer


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    kernel: int
    stride: int
    out_channels: int | None = None
    groups: int = 1
    activation: str = "none"


@dataclass(frozen=True)
class BackboneSpec:
    layers: tuple[LayerSpec, ...]
    input_channels: int = 3

    def __post_init__(self):
        validate(self)

    @property
    def out_channels(self) -> int:
        c = self.input_channels
        for layer in self.layers:
            if layer.kind == "conv":
                c = layer.out_channels
        return c


@dataclass(frozen=True)
class NetAnalysis:
    total_stride: int
    receptive_field: int
    rf_fraction_of_exemplar: float
    final_channels: int
    exemplar_feature: int
    instance_feature: int
    score_map: int

    def to_text(self) -> str:
        return "".join(
            f"{k}={v}\n"
            for k, v in (
                ("total_stride", self.total_stride),
                ("receptive_field", self.receptive_field),
                ("rf_fraction", f"{self.rf_fraction_of_exemplar:.6f}"),
                ("final_channels", self.final_channels),
                ("exemplar_feature", self.exemplar_feature),
                ("instance_feature", self.instance_feature),
                ("score_map", self.score_map),
            )
        )


# ------------------------------------------------------------------- parsing

_CONV_KEYS = ("k", "s", "c", "g", "act")
_POOL_KEYS = ("k", "s")


def parse_backbone_spec(text: str, input_channels: int = 3) -> BackboneSpec:
    layers = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        kind, *fields = line.split()
        if kind not in ("conv", "maxpool"):
            raise BackboneError(f"unknown layer kind {kind!r}", line=lineno)
        allowed = _CONV_KEYS if kind == "conv" else _POOL_KEYS
        kv: dict[str, str] = {}
        for field in fields:
            key, sep, value = field.partition("=")
            if not sep or not value:
                raise BackboneError(f"expected key=value, got {field!r}", line=lineno)
            if key not in allowed:
                raise BackboneError(f"unknown key {key!r} for {kind}", line=lineno)
            if key in kv:
                raise BackboneError(f"duplicate key {key!r}", line=lineno)
            kv[key] = value
        missing = [k for k in allowed if k not in kv]
        if missing:
            raise BackboneError(f"missing key(s) {', '.join(missing)} for {kind}", line=lineno)

        def integer(key: str) -> int:
            try:
                return int(kv[key])
            except ValueError:
                raise BackboneError(f"{key}={kv[key]!r} is not an integer", line=lineno) from None

        if kind == "conv":
            if kv["act"] not in ("relu", "none"):
                raise BackboneError(f"act must be relu or none, got {kv['act']!r}", line=lineno)
            layer = LayerSpec("conv", integer("k"), integer("s"), integer("c"), integer("g"), kv["act"])
        else:
            layer = LayerSpec("maxpool", integer("k"), integer("s"))
        try:
            _validate_layer(layer)
        except BackboneError as exc:
            raise BackboneError(str(exc), line=lineno) from None
        layers.append((lineno, layer))

    if not layers:
        raise BackboneError("backbone has no layers")
    channels = input_channels
    for lineno, layer in layers:
        if layer.kind == "conv":
            _check_groups(layer, channels, line=lineno)
            channels = layer.out_channels
    return BackboneSpec(tuple(layer for _, layer in layers), input_channels)


def load_backbone_spec(path: str | Path) -> BackboneSpec:
    return parse_backbone_spec(Path(path).read_text())


def reference_spec() -> BackboneSpec:
    return parse_backbone_spec(REFERENCE_AFSN)


def _validate_layer(layer: LayerSpec) -> None:
    if layer.kernel < 1:
        raise BackboneError("kernel ≥ 1")
    if layer.stride < 1:
        raise BackboneError("stride ≥ 1")
    if layer.kind == "conv":
        if layer.out_channels is None or layer.out_channels < 1:
            raise BackboneError("channels ≥ 1")
        if layer.groups < 1:
            raise BackboneError("groups ≥ 1")


def _check_groups(layer: LayerSpec, in_channels: int, line: int | None = None, index: int | None = None) -> None:
    if in_channels % layer.groups or layer.out_channels % layer.groups:
        raise BackboneError(
            f"groups={layer.groups} must divide in_channels={in_channels} and out_channels={layer.out_channels}",
            line=line,
            layer=index,
        )


def validate(spec: BackboneSpec) -> None:
    if not spec.layers:
        raise BackboneError("backbone has no layers")
    if spec.input_channels < 1:
        raise BackboneError("input_channels ≥ 1")
    channels = spec.input_channels
    for i, layer in enumerate(spec.layers):
        if layer.kind not in ("conv", "maxpool"):
            raise BackboneError(f"unknown layer kind {layer.kind!r}", layer=i)
        _validate_layer(layer)
        if layer.kind == "conv":
            _check_groups(layer, channels, index=i)
            channels = layer.out_channels
    if output_size(spec, EXEMPLAR_SIZE, strict=False) < 1:
        raise BackboneError(f"network output is empty for a {EXEMPLAR_SIZE}x{EXEMPLAR_SIZE} input")


# ------------------------------------------------------------------ analysis


def output_size(spec: BackboneSpec, n: int, strict: bool = True) -> int:
    """Spatial side length after all layers for an ``n`` x ``n`` input."""
    for i, layer in enumerate(spec.layers):
        if n < layer.kernel:
            if strict:
                raise BackboneError(f"input {n}x{n} smaller than kernel {layer.kernel}", layer=i)
            return 0
        n = (n - layer.kernel) // layer.stride + 1
    return n


def analyze(spec: BackboneSpec) -> NetAnalysis:
    rf, jump = 1, 1
    for layer in spec.layers:
        rf += (layer.kernel - 1) * jump
        jump *= layer.stride
    ez = output_size(spec, EXEMPLAR_SIZE, strict=False)
    ex = output_size(spec, INSTANCE_SIZE, strict=False)
    return NetAnalysis(
        total_stride=jump,
        receptive_field=rf,
        rf_fraction_of_exemplar=rf / EXEMPLAR_SIZE,
        final_channels=spec.out_channels,
        exemplar_feature=ez,
        instance_feature=ex,
        score_map=ex - ez + 1,
    )


def stride_score_map(total_stride: int, exemplar: int = EXEMPLAR_SIZE, instance: int = INSTANCE_SIZE) -> float:
    """Score-map side implied by (instance - exemplar) / (map - 1) = stride."""
    return (instance - exemplar) / total_stride + 1


def check_geometry(spec: BackboneSpec) -> NetAnalysis:
    """Raise unless the stride relation yields an integral map equal to the real one."""
    a = analyze(spec)
    implied = stride_score_map(a.total_stride)
    if not float(implied).is_integer():
        raise BackboneError(
            f"score map size (255-127)/{a.total_stride}+1 = {implied:.4f} is not an integer"
        )
    if int(implied) != a.score_map:
        raise BackboneError(
            f"stride {a.total_stride} implies a {int(implied)}x{int(implied)} score map "
            f"but valid convolution yields {a.score_map}x{a.score_map}"
        )
    return a


def check_design_rules(analysis: NetAnalysis) -> list[str]:
    findings = []
    lo, hi = PREFERRED_STRIDE
    if not lo <= analysis.total_stride <= hi:
        findings.append(f"stride {analysis.total_stride} outside preferred {lo}–{hi}")
    flo, fhi = PREFERRED_RF_FRACTION
    frac = analysis.rf_fraction_of_exemplar
    if not flo <= frac <= fhi:
        findings.append(
            f"receptive field {frac * 100:.0f}% of exemplar, preferred {flo * 100:.0f}–{fhi * 100:.0f}%"
        )
    if analysis.final_channels != PREFERRED_DEEP_CHANNELS:
        findings.append(
            f"deepest conv has {analysis.final_channels} channels, preferred {PREFERRED_DEEP_CHANNELS}"
        )
    return findings


# ---------------------------------------------------------- build / forward


def build(spec: BackboneSpec, seed: int) -> dict[str, Tensor]:
    """Uniform fan-in initialization, bound sqrt(6 / fan_in); zero biases."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    channels = spec.input_channels
    for i, layer in enumerate(spec.layers):
        if layer.kind != "conv":
            continue
        c_per = channels // layer.groups
        fan_in = c_per * layer.kernel * layer.kernel
        bound = math.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(layer.out_channels, c_per, layer.kernel, layer.kernel))
        params[f"backbone.{i}.weight"] = Tensor(w, requires_grad=True, name=f"backbone.{i}.weight")
        params[f"backbone.{i}.bias"] = Tensor(
            np.zeros(layer.out_channels), requires_grad=True, name=f"backbone.{i}.bias"
        )
        channels = layer.out_channels
    return params


def forward_backbone(spec: BackboneSpec, params: dict[str, Tensor], image: Tensor) -> Tensor:
    if image.data.ndim != 3 or image.shape[0] != spec.input_channels:
        raise BackboneError(f"expected a [{spec.input_channels},H,W] image, got {image.shape}")
    x = image
    for i, layer in enumerate(spec.layers):
        side = min(x.shape[1], x.shape[2])
        if side < layer.kernel:
            raise BackboneError(f"input {x.shape[1]}x{x.shape[2]} smaller than kernel {layer.kernel}", layer=i)
        if layer.kind == "conv":
            x = conv2d(x, params[f"backbone.{i}.weight"], params[f"backbone.{i}.bias"], layer.stride, layer.groups)
            if layer.activation == "relu":
                x = relu(x)
        else:
            x = maxpool2d(x, layer.kernel, layer.stride)
    return x
