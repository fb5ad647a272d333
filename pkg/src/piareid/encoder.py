"""Compact convolutional encoder for 64x32 person crops.

Three stride-scheduled conv+relu blocks shrink the input by 8x in each
spatial dimension, so the default 3x64x32 crop becomes a 32x8x4 feature
map.  ``embed`` turns a (masked) map into an embedding via global average
pooling, optionally concatenated with global max pooling, then a final
batch norm when enabled.  The identity and clothing classifier heads are
plain linear layers scored with log-softmax.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

POOL_GAP = "gap"
POOL_GAP_GMP = "gap_gmp"
POOLING_MODES = (POOL_GAP, POOL_GAP_GMP)

DEFAULT_WIDTHS = (16, 32, 32)
DEFAULT_STRIDES = (4, 2, 1)
DEFAULT_KERNEL = 3


class EncoderConfigError(ValueError):
    """Raised for structurally invalid encoder settings."""


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...],
                 fan_in: int, fan_out: int) -> np.ndarray:
    half_width = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-half_width, half_width, size=shape)


@dataclass
class BatchNormState:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray

    @classmethod
    def create(cls, dim: int) -> "BatchNormState":
        return cls(
            gamma=dc.parameter(np.ones(dim)),
            beta=dc.parameter(np.zeros(dim)),
            running_mean=np.zeros(dim),
            running_var=np.ones(dim),
        )


@dataclass
class EncoderParams:
    weights: list[Tensor]
    biases: list[Tensor]
    strides: tuple[int, ...]
    kernel_size: int
    input_hw: tuple[int, int]

    @property
    def padding(self) -> int:
        return self.kernel_size // 2

    def out_channels(self) -> int:
        return self.weights[-1].shape[0]

    def feature_hw(self) -> tuple[int, int]:
        h, w = self.input_hw
        k, p = self.kernel_size, self.padding
        for s in self.strides:
            h = (h + 2 * p - k) // s + 1
            w = (w + 2 * p - k) // s + 1
        return h, w


@dataclass
class ClassifierHeads:
    id_weight: Tensor
    id_bias: Tensor
    clothing_weight: Tensor | None = None
    clothing_bias: Tensor | None = None

    @property
    def num_identities(self) -> int:
        return self.id_weight.shape[1]

    @property
    def num_clothing_classes(self) -> int | None:
        if self.clothing_weight is None:
            return None
        return self.clothing_weight.shape[1]


def validate_architecture(widths: tuple[int, ...], strides: tuple[int, ...],
                          kernel_size: int) -> None:
    if len(widths) != len(strides):
        raise EncoderConfigError(
            f"widths {widths} and strides {strides} must have equal length"
        )
    if not widths:
        raise EncoderConfigError("need at least one convolution block")
    if any(w < 1 for w in widths):
        raise EncoderConfigError(f"widths must be positive, got {widths}")
    if kernel_size % 2 != 1 or kernel_size < 1:
        raise EncoderConfigError(f"kernel size must be odd and positive, got {kernel_size}")
    if strides[-1] != 1:
        raise EncoderConfigError(
            f"final block stride must be 1 to preserve mask resolution, got {strides[-1]}"
        )
    if any(s < 1 for s in strides):
        raise EncoderConfigError(f"strides must be positive, got {strides}")


def init_encoder(rng: np.random.Generator, *,
                 widths: tuple[int, ...] = DEFAULT_WIDTHS,
                 strides: tuple[int, ...] = DEFAULT_STRIDES,
                 kernel_size: int = DEFAULT_KERNEL,
                 input_hw: tuple[int, int] = (64, 32),
                 in_channels: int = 3) -> EncoderParams:
    validate_architecture(widths, strides, kernel_size)
    weights: list[Tensor] = []
    biases: list[Tensor] = []
    prev = in_channels
    for width in widths:
        fan_in = prev * kernel_size * kernel_size
        fan_out = width * kernel_size * kernel_size
        weights.append(dc.parameter(uniform_init(
            rng, (width, prev, kernel_size, kernel_size), fan_in, fan_out
        )))
        biases.append(dc.parameter(np.zeros(width)))
        prev = width
    params = EncoderParams(
        weights=weights,
        biases=biases,
        strides=tuple(int(s) for s in strides),
        kernel_size=int(kernel_size),
        input_hw=(int(input_hw[0]), int(input_hw[1])),
    )
    h, w = params.feature_hw()
    if h < 1 or w < 1:
        raise EncoderConfigError(
            f"input {input_hw} collapses to an empty {h}x{w} feature map"
        )
    return params


def embedding_dim(widths: tuple[int, ...], pooling_mode: str) -> int:
    if pooling_mode == POOL_GAP:
        return widths[-1]
    if pooling_mode == POOL_GAP_GMP:
        return 2 * widths[-1]
    raise EncoderConfigError(f"unknown pooling mode {pooling_mode!r}")


def forward_backbone(pixels: Tensor, params: EncoderParams, *, training: bool) -> Tensor:
    """Image batch [N,3,H,W] (or one image [3,H,W]) to feature map(s)."""
    expected_c = params.weights[0].shape[1]
    shape = pixels.shape
    if len(shape) not in (3, 4):
        raise dc.ShapeMismatchError(
            f"backbone expects [3,H,W] or [N,3,H,W], got {shape}"
        )
    c, h, w = shape[-3], shape[-2], shape[-1]
    if c != expected_c or (h, w) != params.input_hw:
        raise dc.ShapeMismatchError(
            f"backbone configured for {expected_c}x{params.input_hw[0]}"
            f"x{params.input_hw[1]} input, got {c}x{h}x{w}"
        )
    out = pixels
    for weight, bias, stride in zip(params.weights, params.biases, params.strides):
        out = dc.relu(dc.conv2d(out, weight, bias, stride=stride, padding=params.padding))
    return out


def embed(fmap: Tensor, *, pooling_mode: str, bn: BatchNormState | None,
          training: bool) -> Tensor:
    """Feature map(s) to embedding(s): pooled descriptor, then optional BN."""
    if pooling_mode not in POOLING_MODES:
        raise EncoderConfigError(f"unknown pooling mode {pooling_mode!r}")
    pooled = dc.global_avg_pool(fmap)
    if pooling_mode == POOL_GAP_GMP:
        pooled = dc.concat([pooled, dc.global_max_pool(fmap)], axis=-1)
    if bn is not None:
        pooled = dc.batch_norm(pooled, bn.gamma, bn.beta, state=bn, training=training)
    return pooled


def init_heads(rng: np.random.Generator, dim: int, num_identities: int,
               num_clothing_classes: int | None) -> ClassifierHeads:
    if num_identities < 2:
        raise EncoderConfigError(
            f"identity head needs at least 2 classes, got {num_identities}"
        )
    heads = ClassifierHeads(
        id_weight=dc.parameter(uniform_init(rng, (dim, num_identities), dim, num_identities)),
        id_bias=dc.parameter(np.zeros(num_identities)),
    )
    if num_clothing_classes is not None:
        if num_clothing_classes < 2:
            raise EncoderConfigError(
                f"clothing head needs at least 2 classes, got {num_clothing_classes}"
            )
        heads.clothing_weight = dc.parameter(
            uniform_init(rng, (dim, num_clothing_classes), dim, num_clothing_classes)
        )
        heads.clothing_bias = dc.parameter(np.zeros(num_clothing_classes))
    return heads


def classify(embedding: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Log class probabilities for one embedding or a batch of them."""
    return dc.log_softmax(dc.linear(embedding, weight, bias), axis=-1)
