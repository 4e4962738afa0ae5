"""Reusable network blocks: conv units, residual blocks, channel gates,
cross-task spatial attention and task-specific heads.

Blocks register their parameters in a :class:`~taskpyramid.tensor.ParamStore`
under a dotted name prefix at construction time and are pure functions of
their input afterwards.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .errors import ContractViolation
from .tensor import ParamStore, Tensor

NORM_GROUPS = 4  # per-sample group norm keeps outputs independent of batch composition


class ConvUnit:
    """Convolution with optional bias; weights fan-in initialized, bias zero.

    Convolutions feeding straight into a norm layer drop the bias: the norm's
    shift parameter makes it redundant.
    """

    def __init__(self, store: ParamStore, name: str, in_c: int, out_c: int,
                 kernel: int = 3, stride: int = 1, padding: int | None = None,
                 bias: bool = True):
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        self.weight = store.conv_weight(f"{name}.weight", out_c, in_c, kernel, kernel)
        self.bias = store.zeros(f"{name}.bias", (1, out_c, 1, 1)) if bias else Tensor(
            np.zeros((1, out_c, 1, 1))
        )

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class NormUnit:
    """Group normalization with learnable per-channel scale and shift."""

    def __init__(self, store: ParamStore, name: str, channels: int, groups: int = NORM_GROUPS):
        if channels % groups != 0:
            raise ContractViolation(f"{name}: {channels} channels not divisible by {groups} norm groups")
        self.groups = groups
        self.gamma = store.ones(f"{name}.gamma", (1, channels, 1, 1))
        self.beta = store.zeros(f"{name}.beta", (1, channels, 1, 1))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.group_norm(x, self.gamma, self.beta, self.groups)


class ResidualBlock:
    """Pre-activation residual block: x + conv2(act(norm(conv1(act(norm(x)))))).

    A 1x1 projection is added to the skip path when input and output channel
    counts differ.  With zeroed convolutions (and matching channels) the block
    is exactly the identity.
    """

    def __init__(self, store: ParamStore, name: str, in_c: int, out_c: int,
                 in_groups: int = NORM_GROUPS):
        self.norm1 = NormUnit(store, f"{name}.norm1", in_c, groups=in_groups)
        self.conv1 = ConvUnit(store, f"{name}.conv1", in_c, out_c, bias=False)
        self.norm2 = NormUnit(store, f"{name}.norm2", out_c)
        self.conv2 = ConvUnit(store, f"{name}.conv2", out_c, out_c)
        self.proj = ConvUnit(store, f"{name}.proj", in_c, out_c, kernel=1) if in_c != out_c else None
        self.in_channels = in_c
        self.out_channels = out_c

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.in_channels:
            raise ContractViolation(
                f"residual block expects {self.in_channels} channels, got {x.shape[1]}"
            )
        y = self.conv1(ops.relu(self.norm1(x)))
        y = self.conv2(ops.relu(self.norm2(y)))
        skip = self.proj(x) if self.proj is not None else x
        return ops.add(skip, y)


class SEGate:
    """Squeeze-and-excitation channel gate.

    Gate values g = sigmoid(fc2(relu(fc1(avgpool(x))))) lie strictly in (0,1)
    and rescale each channel of x.  fc1/fc2 are 1x1 convolutions on the pooled
    (n, c, 1, 1) descriptor.
    """

    def __init__(self, store: ParamStore, name: str, channels: int, reduction: int = 4):
        if channels % reduction != 0:
            raise ContractViolation(f"{name}: reduction {reduction} must divide {channels} channels")
        hidden = channels // reduction
        self.fc1 = ConvUnit(store, f"{name}.fc1", channels, hidden, kernel=1)
        self.fc2 = ConvUnit(store, f"{name}.fc2", hidden, channels, kernel=1)

    def gate(self, x: Tensor) -> Tensor:
        return ops.sigmoid(self.fc2(ops.relu(self.fc1(ops.global_avg_pool(x)))))

    def __call__(self, x: Tensor) -> Tensor:
        g = self.gate(x)
        return ops.mul(ops.broadcast_hw(g, x.shape[2], x.shape[3]), x)


class AttentionTransform:
    """Spatial-attention distillation term for one ordered task pair at one scale.

    Produces sigmoid(mask_conv(F)) * value_conv(F); both convolutions map the
    scale's channel count onto itself.
    """

    def __init__(self, store: ParamStore, name: str, channels: int, kernel: int = 3):
        self.mask_conv = ConvUnit(store, f"{name}.mask", channels, channels, kernel=kernel)
        self.value_conv = ConvUnit(store, f"{name}.value", channels, channels, kernel=kernel)

    def __call__(self, f_source: Tensor) -> Tensor:
        mask = ops.sigmoid(self.mask_conv(f_source))
        return ops.mul(mask, self.value_conv(f_source))


class TaskHead:
    """Task-specific head: two residual blocks then a 1x1 prediction conv.

    Returns (features, prediction); features keep the configured width at the
    input resolution, the prediction has the task's output channel count.
    """

    def __init__(self, store: ParamStore, name: str, in_c: int, width: int, out_c: int):
        self.block1 = ResidualBlock(store, f"{name}.block1", in_c, width)
        self.block2 = ResidualBlock(store, f"{name}.block2", width, width)
        self.pred = ConvUnit(store, f"{name}.pred", width, out_c, kernel=1)

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor]:
        features = self.block2(self.block1(x))
        return features, self.pred(features)
