"""Lightweight student: dense connectivity around inverted-residual blocks.

Layout at 224x224 input (C = number of classes)::

    stem     7x7/2 conv(64) -> BN -> ReLU6 -> 3x3/2 max pool      64 x 56 x 56
    stage1   4 hybrid blocks                                     128 x 56 x 56
    down1    2x2/2 avg pool                                      128 x 28 x 28
    stage2   6 hybrid blocks                                     224 x 28 x 28
    down2    2x2/2 avg pool                                      224 x 14 x 14
    stage3   8 hybrid blocks                                     352 x 14 x 14
    down3    2x2/2 avg pool                                      352 x  7 x  7  -> aux branch
    stage4   10 hybrid blocks                                    512 x  7 x  7
    head     GAP -> linear(512 -> C)

The auxiliary branch (stride 1 alignment block, GAP, linear head) hangs off
``down3`` and is only used for training signals.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import torch
import torch.nn as nn

from . import nn_core as core
from .nn_core import (
    AvgPool2d, BatchNorm2d, ConfigurationError, Conv2d, DepthwiseConv2d,
    GlobalAvgPool, Linear, MaxPool2d, ReLU6, ShapeError,
)


@dataclass(frozen=True)
class HybridBlockConfig:
    growth_rate: int = 16
    expansion: int = 3
    bottleneck_factor: int = 4

    def __post_init__(self):
        if min(self.growth_rate, self.expansion, self.bottleneck_factor) <= 0:
            raise ConfigurationError(f"block config values must be positive: {self}")

    @property
    def bottleneck_width(self) -> int:
        return self.bottleneck_factor * self.growth_rate

    @property
    def expanded_width(self) -> int:
        return self.expansion * self.bottleneck_width


@dataclass(frozen=True)
class StageConfig:
    num_blocks: tuple[int, ...] = (4, 6, 8, 10)
    stem_channels: int = 64
    block: HybridBlockConfig = field(default_factory=HybridBlockConfig)
    aux_stage: int = 3

    def __post_init__(self):
        if not self.num_blocks or min(self.num_blocks) <= 0 or self.stem_channels <= 0:
            raise ConfigurationError(f"invalid stage config: {self}")
        if not 1 <= self.aux_stage < len(self.num_blocks):
            raise ConfigurationError("aux branch must attach after a downsampling layer")

    def stage_out_channels(self) -> list[int]:
        out, c = [], self.stem_channels
        for n in self.num_blocks:
            c += n * self.block.growth_rate
            out.append(c)
        return out


class StudentForwardBundle(NamedTuple):
    main_logits: torch.Tensor
    aux_logits: torch.Tensor
    f_main: torch.Tensor
    f_aux: torch.Tensor
    tap: torch.Tensor


def conv_bn(cin, cout, kernel=1, stride=1, padding=0, act=True):
    layers = [Conv2d(cin, cout, kernel, stride, padding), BatchNorm2d(cout)]
    if act:
        layers.append(ReLU6())
    return nn.Sequential(*layers)


class HybridBlock(nn.Module):
    """Bottleneck 1x1 conv, inverted residual with linear 1x1 shortcut, dense concat.

    ``forward(x)`` returns ``cat([x, F(x_bot) + W(x_bot)])`` with ``k`` new channels.
    """

    def __init__(self, in_channels: int, cfg: HybridBlockConfig = HybridBlockConfig()):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = in_channels + cfg.growth_rate
        bw, ew, k = cfg.bottleneck_width, cfg.expanded_width, cfg.growth_rate
        self.bottleneck = conv_bn(in_channels, bw)
        self.expand = conv_bn(bw, ew)
        self.depthwise = nn.Sequential(DepthwiseConv2d(ew, 3, 1, 1), BatchNorm2d(ew), ReLU6())
        self.project = conv_bn(ew, k, act=False)
        self.shortcut = conv_bn(bw, k, act=False)

    def residual(self, x):
        x_bot = self.bottleneck(x)
        return core.add(self.project(self.depthwise(self.expand(x_bot))), self.shortcut(x_bot))

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise ShapeError(f"block expects {self.in_channels} channels, got {x.shape[1]}")
        return core.concat_channels(x, self.residual(x))


class AlignmentBranch(nn.Module):
    """Depthwise 3x3 -> pointwise 1x1 main path plus a 1x1 shortcut, summed.

    Shared by both networks' auxiliary heads; the teacher uses stride 2, the
    student stride 1.
    """

    def __init__(self, in_channels: int, out_channels: int = 352, stride: int = 1):
        super().__init__()
        self.in_channels, self.out_channels, self.stride = in_channels, out_channels, stride
        self.depthwise = nn.Sequential(
            DepthwiseConv2d(in_channels, 3, stride, 1), BatchNorm2d(in_channels), ReLU6()
        )
        self.pointwise = conv_bn(in_channels, out_channels, act=False)
        self.shortcut = conv_bn(in_channels, out_channels, stride=stride, act=False)

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise ShapeError(f"aux branch expects {self.in_channels} channels, got {x.shape[1]}")
        return core.add(self.pointwise(self.depthwise(x)), self.shortcut(x))


class AuxHead(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, num_classes: int, stride: int):
        super().__init__()
        self.align = AlignmentBranch(in_channels, out_channels, stride)
        self.pool = GlobalAvgPool()
        self.fc = Linear(out_channels, num_classes)

    def forward(self, x):
        f = self.pool(self.align(x))
        return self.fc(f), f


class StudentNet(nn.Module):
    def __init__(self, num_classes: int, config: StageConfig = StageConfig()):
        super().__init__()
        if num_classes < 2:
            raise ConfigurationError(f"need at least 2 classes, got {num_classes}")
        self.num_classes = num_classes
        self.config = config
        self.stem = nn.Sequential(
            Conv2d(3, config.stem_channels, 7, 2, 3), BatchNorm2d(config.stem_channels), ReLU6(),
            MaxPool2d(3, 2, 1),
        )
        c = config.stem_channels
        for s, n in enumerate(config.num_blocks, start=1):
            blocks = []
            for _ in range(n):
                blocks.append(HybridBlock(c, config.block))
                c += config.block.growth_rate
            self.add_module(f"stage{s}", nn.Sequential(*blocks))
            if s < len(config.num_blocks):
                self.add_module(f"down{s}", AvgPool2d(2, 2))
        self.num_features = c
        self.pool = GlobalAvgPool()
        self.fc = Linear(c, num_classes)
        aux_in = config.stage_out_channels()[config.aux_stage - 1]
        self.aux = AuxHead(aux_in, aux_in, num_classes, stride=1)

    @property
    def num_stages(self) -> int:
        return len(self.config.num_blocks)

    def features(self, x, trace: list | None = None):
        """Run the backbone; returns (final map, aux tap)."""
        if x.dim() != 4 or x.shape[1] != 3:
            raise ShapeError(f"student expects (N, 3, H, W) input, got {tuple(x.shape)}")
        x = self.stem(x)
        tap = None
        for s in range(1, self.num_stages + 1):
            x = getattr(self, f"stage{s}")(x)
            if trace is not None:
                trace.append(tuple(x.shape[1:]))
            if s < self.num_stages:
                x = getattr(self, f"down{s}")(x)
                if s == self.config.aux_stage:
                    tap = x
        return x, tap

    def forward(self, x) -> StudentForwardBundle:
        fmap, tap = self.features(x)
        f_main = self.pool(fmap)
        aux_logits, f_aux = self.aux(tap)
        return StudentForwardBundle(self.fc(f_main), aux_logits, f_main, f_aux, tap)

    def deployment_modules(self):
        """Names of top-level children on the inference path (aux excluded)."""
        return [n for n, _ in self.named_children() if n != "aux"]


def build_student(num_classes: int, config: StageConfig | None = None,
                  generator: torch.Generator | None = None) -> StudentNet:
    net = StudentNet(num_classes, config or StageConfig())
    core.init_weights(net, generator)
    return net
