"""Siamese network: shared backbone, depthwise correlation, three 1x1 heads."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import backbone as bb
from .labels import HeadOutput
from .tensor import Tensor, conv2d, relu, scale, sigmoid, xcorr_depthwise

HEAD_HIDDEN = 32
# Prior probability of a positive cell at initialization.
SCORE_PRIOR = 0.1
# A square target cropped by the exemplar rule spans 127/2 patch pixels.
NOMINAL_PATCH_SIZE = bb.EXEMPLAR_SIZE / 2.0

PIXEL_MEAN = 127.5
PIXEL_SCALE = 64.0


def build_head(in_channels: int, seed: int, hidden: int = HEAD_HIDDEN) -> dict[str, Tensor]:
    rng = np.random.default_rng([seed, 1])

    def uniform(shape):
        bound = math.sqrt(6.0 / shape[1])
        return rng.uniform(-bound, bound, size=shape)

    def leaf(name, arr):
        return name, Tensor(arr, requires_grad=True, name=name)

    prior_logit = math.log(SCORE_PRIOR / (1.0 - SCORE_PRIOR))
    return dict(
        [
            leaf("head.hidden.weight", uniform((hidden, in_channels, 1, 1))),
            leaf("head.hidden.bias", np.zeros(hidden)),
            leaf("head.score.weight", uniform((1, hidden, 1, 1)) * 0.1),
            leaf("head.score.bias", np.full(1, prior_logit)),
            leaf("head.offset.weight", uniform((2, hidden, 1, 1)) * 0.1),
            leaf("head.offset.bias", np.full(2, 0.5)),
            leaf("head.size.weight", uniform((2, hidden, 1, 1)) * 0.1),
            leaf("head.size.bias", np.full(2, math.log(NOMINAL_PATCH_SIZE))),
        ]
    )


def head_forward(params: dict[str, Tensor], corr: Tensor) -> HeadOutput:
    h = relu(conv2d(corr, params["head.hidden.weight"], params["head.hidden.bias"]))
    score = sigmoid(conv2d(h, params["head.score.weight"], params["head.score.bias"]))
    offset = conv2d(h, params["head.offset.weight"], params["head.offset.bias"])
    size = conv2d(h, params["head.size.weight"], params["head.size.bias"])
    return HeadOutput(score=score, offset=offset, size=size)


def normalize_patch(patch: Tensor) -> Tensor:
    return Tensor((patch.data - PIXEL_MEAN) / PIXEL_SCALE)


@dataclass
class SiameseModel:
    spec: bb.BackboneSpec
    params: dict[str, Tensor]
    exemplar_forwards: int = field(default=0, compare=False)
    instance_forwards: int = field(default=0, compare=False)

    exemplar_size = bb.EXEMPLAR_SIZE
    instance_size = bb.INSTANCE_SIZE

    def __post_init__(self):
        self.analysis = bb.analyze(self.spec)
        expected = param_shapes(self.spec)
        got = {k: v.shape for k, v in self.params.items()}
        if got != expected:
            diff = sorted(set(expected.items()) ^ set(got.items()))
            raise ValueError(f"parameters do not match backbone: {diff[:4]}")

    @property
    def stride(self) -> int:
        return self.analysis.total_stride

    @property
    def score_size(self) -> int:
        return self.analysis.score_map

    @property
    def map_origin(self) -> float:
        """Instance-patch coordinate that score cell (0, 0) is centered on."""
        a = self.analysis
        covered = (a.exemplar_feature - 1) * a.total_stride + a.receptive_field
        return covered / 2.0

    def with_params(self, params: dict[str, Tensor]) -> "SiameseModel":
        return SiameseModel(self.spec, params)

    def features(self, patch: Tensor) -> Tensor:
        return bb.forward_backbone(self.spec, self.params, normalize_patch(patch))

    def embed(self, patch: Tensor) -> Tensor:
        self.exemplar_forwards += 1
        return self.features(patch)

    def correlate(self, exemplar_feat: Tensor, instance_feat: Tensor) -> Tensor:
        corr = xcorr_depthwise(instance_feat, exemplar_feat)
        cells = exemplar_feat.shape[1] * exemplar_feat.shape[2]
        return scale(corr, 1.0 / cells)

    def respond(self, exemplar_feat: Tensor, patch: Tensor, crop=None) -> HeadOutput:
        self.instance_forwards += 1
        return head_forward(self.params, self.correlate(exemplar_feat, self.features(patch)))


def param_shapes(spec: bb.BackboneSpec, hidden: int = HEAD_HIDDEN) -> dict[str, tuple[int, ...]]:
    shapes = {}
    channels = spec.input_channels
    for i, layer in enumerate(spec.layers):
        if layer.kind == "conv":
            shapes[f"backbone.{i}.weight"] = (layer.out_channels, channels // layer.groups, layer.kernel, layer.kernel)
            shapes[f"backbone.{i}.bias"] = (layer.out_channels,)
            channels = layer.out_channels
    shapes.update(
        {
            "head.hidden.weight": (hidden, channels, 1, 1),
            "head.hidden.bias": (hidden,),
            "head.score.weight": (1, hidden, 1, 1),
            "head.score.bias": (1,),
            "head.offset.weight": (2, hidden, 1, 1),
            "head.offset.bias": (2,),
            "head.size.weight": (2, hidden, 1, 1),
            "head.size.bias": (2,),
        }
    )
    return shapes


def build_model(spec: bb.BackboneSpec, seed: int) -> SiameseModel:
    params = bb.build(spec, seed)
    params.update(build_head(spec.out_channels, seed))
    return SiameseModel(spec, params)
