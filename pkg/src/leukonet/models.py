"""Builders for the custom CNN and MobileNetV2 with a replacement head."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import (
    BatchNorm,
    Conv2D,
    Dense,
    Dropout,
    Flatten,
    GlobalAvgPool,
    InvertedResidual,
    MaxPool2D,
    ReLU,
    ReLU6,
    Softmax,
)
from .network import Model, ModelSpec
from .tensor import Rng, ShapeError

CUSTOM = "custom"
MOBILENETV2 = "mobilenetv2"


@dataclass(frozen=True)
class InvertedResidualConfig:
    expansion: int
    channels: int
    repeats: int
    stride: int

    def __post_init__(self):
        if self.expansion < 1 or self.repeats < 1 or self.stride not in (1, 2):
            raise ValueError(f"invalid bottleneck config {self}")


# (t, c, n, s) rows of the MobileNetV2 backbone
MOBILENETV2_STAGES = (
    InvertedResidualConfig(1, 16, 1, 1),
    InvertedResidualConfig(6, 24, 2, 2),
    InvertedResidualConfig(6, 32, 3, 2),
    InvertedResidualConfig(6, 64, 4, 2),
    InvertedResidualConfig(6, 96, 3, 1),
    InvertedResidualConfig(6, 160, 3, 2),
    InvertedResidualConfig(6, 320, 1, 1),
)


def scale_channels(channels: int, alpha: float, divisor: int = 8) -> int:
    """Scale by alpha and round to the nearest multiple of ``divisor`` (minimum ``divisor``)."""
    v = channels * alpha
    return max(divisor, int(v + divisor / 2) // divisor * divisor)


def custom_cnn_spec(input_size=224, classes=4, channels=3) -> ModelSpec:
    if input_size % 8:
        raise ShapeError(f"custom CNN input size must be divisible by 8, got {input_size}")
    layers = []
    for i, filters in enumerate((32, 64, 128), start=1):
        layers += [
            (f"conv{i}", Conv2D(filters, 3, 1, "same")),
            (f"relu{i}", ReLU()),
            (f"pool{i}", MaxPool2D()),
        ]
    layers += [
        ("flatten", Flatten()),
        ("dense1", Dense(128)),
        ("relu4", ReLU()),
        ("dropout", Dropout(0.5)),
        ("output", Dense(classes, init="glorot")),
        ("softmax", Softmax()),
    ]
    spec = ModelSpec(CUSTOM, (input_size, input_size, channels), classes, layers)
    spec.shapes()
    return spec


def build_custom_cnn(input_size=224, classes=4, rng: Rng | None = None, dtype=np.float32) -> Model:
    """Three conv/pool stages (32, 64, 128 filters), dense(128), dropout 0.5, softmax.

    With ``rng=None`` every tensor is zero-filled (used when loading checkpoints).
    """
    return Model(custom_cnn_spec(input_size, classes), rng, dtype)


def inverted_residual_block(cin: int, expansion: int, cout: int, stride: int) -> InvertedResidual:
    return InvertedResidual(cin, expansion, cout, stride)


def mobilenet_v2_spec(input_size=224, classes=4, alpha=1.0, head_hidden=128, channels=3) -> ModelSpec:
    if input_size < 32 or input_size % 32:
        raise ShapeError(f"MobileNetV2 input size must be a multiple of 32 and >= 32, got {input_size}")
    if alpha <= 0:
        raise ValueError("width multiplier must be positive")
    stem = scale_channels(32, alpha)
    layers = [
        ("stem", Conv2D(stem, 3, 2, "same", use_bias=False)),
        ("stem_bn", BatchNorm()),
        ("stem_relu6", ReLU6()),
    ]
    cin = stem
    block = 0
    for cfg in MOBILENETV2_STAGES:
        cout = scale_channels(cfg.channels, alpha)
        for r in range(cfg.repeats):
            block += 1
            stride = cfg.stride if r == 0 else 1
            layers.append((f"block{block}", inverted_residual_block(cin, cfg.expansion, cout, stride)))
            cin = cout
    last = scale_channels(1280, alpha)
    layers += [
        ("last_conv", Conv2D(last, 1, 1, use_bias=False)),
        ("last_bn", BatchNorm()),
        ("last_relu6", ReLU6()),
        ("gap", GlobalAvgPool()),
        ("head_dense", Dense(head_hidden)),
        ("head_relu", ReLU()),
        ("output", Dense(classes, init="glorot")),
        ("softmax", Softmax()),
    ]
    options = {"alpha": alpha, "head_hidden": head_hidden}
    spec = ModelSpec(MOBILENETV2, (input_size, input_size, channels), classes, layers, options)
    spec.shapes()
    return spec


def build_mobilenet_v2(input_size=224, classes=4, alpha=1.0, head_hidden=128,
                       rng: Rng | None = None, dtype=np.float32) -> Model:
    return Model(mobilenet_v2_spec(input_size, classes, alpha, head_hidden), rng, dtype)


def bottleneck_blocks(spec: ModelSpec) -> list:
    return [layer for _, layer in spec.layers if isinstance(layer, InvertedResidual)]


def pre_gap_shape(spec: ModelSpec) -> tuple:
    for _, layer, s_in, _ in spec.shapes():
        if isinstance(layer, GlobalAvgPool):
            return s_in
    raise ValueError("model has no global average pooling layer")


def freeze_backbone(model: Model, frozen: bool = True) -> Model:
    """Mark every layer before the global average pool as (non-)trainable."""
    if model.spec.kind != MOBILENETV2:
        raise ValueError(f"freeze_backbone applies to MobileNetV2 models, not {model.spec.kind!r}")
    backbone = set(model.backbone_layers())
    if frozen:
        model.frozen |= backbone
    else:
        model.frozen -= backbone
    return model


def _batchnorms(layers):
    for _, layer in layers:
        if isinstance(layer, BatchNorm):
            yield layer
        yield from _batchnorms(getattr(layer, "layers", ()))


def calibrate_batchnorm(model: Model, images, batch_size: int = 64) -> Model:
    """Set every batchnorm's running statistics to the average of its batch
    statistics over ``images`` (one train-mode pass, no parameter updates)."""
    bns = list(_batchnorms(model.layers))
    saved = [bn.momentum for bn in bns]
    frozen = model.frozen
    model.frozen = set()
    try:
        for k, start in enumerate(range(0, len(images), batch_size), start=1):
            for bn in bns:
                bn.momentum = (k - 1) / k
            model.forward(images[start:start + batch_size], train=True)
    finally:
        for bn, m in zip(bns, saved):
            bn.momentum = m
        model.frozen = frozen
    return model


def forward_model(model: Model, batch, train=False, rng=None):
    return model.forward(batch, train=train, rng=rng)


def build_model(kind: str, input_size: int, classes: int, alpha=1.0, head_hidden=128,
                rng: Rng | None = None, dtype=np.float32) -> Model:
    if kind == CUSTOM:
        return build_custom_cnn(input_size, classes, rng, dtype)
    if kind == MOBILENETV2:
        return build_mobilenet_v2(input_size, classes, alpha, head_hidden, rng, dtype)
    raise ValueError(f"unknown model kind {kind!r}")


def model_spec(kind: str, input_size: int, classes: int, alpha=1.0, head_hidden=128) -> ModelSpec:
    if kind == CUSTOM:
        return custom_cnn_spec(input_size, classes)
    if kind == MOBILENETV2:
        return mobilenet_v2_spec(input_size, classes, alpha, head_hidden)
    raise ValueError(f"unknown model kind {kind!r}")
