"""Layer substrate shared by the student and teacher networks.

Every layer kind used by the two networks goes through a checked functional
forward (``conv2d_forward``, ``pool_forward``, ...). The module classes below
wrap those functions so that networks are ordinary ``torch.nn.Module`` trees
while shape/configuration errors are raised with a readable message instead of
an opaque backend error. Reverse-mode gradients come from torch autograd.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import torch
import torch.nn as nn
import torch.nn.functional as F

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

LAYER_KINDS = (
    "conv2d",
    "depthwise_conv2d",
    "batch_norm",
    "relu6",
    "relu",
    "max_pool",
    "avg_pool",
    "global_avg_pool",
    "linear",
    "concat_channels",
    "add",
)


class ShapeError(ValueError):
    """Tensor shapes are incompatible with the layer."""


class ConfigurationError(ValueError):
    """Layer or network hyperparameters are invalid."""


class DomainError(ValueError):
    """An argument lies outside the mathematical domain of the operation."""


class StateError(RuntimeError):
    """An operation was called in the wrong lifecycle state."""


@dataclass(frozen=True)
class TensorShape:
    batch: int
    channels: int
    height: int
    width: int

    def __post_init__(self):
        if min(self.batch, self.channels, self.height, self.width) < 1:
            raise ConfigurationError(f"all dimensions must be >= 1, got {self}")

    @classmethod
    def of(cls, x: torch.Tensor) -> "TensorShape":
        if x.dim() != 4:
            raise ShapeError(f"expected a rank-4 feature map, got shape {tuple(x.shape)}")
        return cls(*x.shape)


@dataclass(frozen=True)
class LayerSpec:
    """Declarative description of one layer (used for audits and reports)."""

    kind: str
    params: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigurationError(f"unknown layer kind {self.kind!r}")
        if self.kind == "depthwise_conv2d":
            cin = self.params.get("in_channels")
            cout = self.params.get("out_channels", cin)
            if cin is not None and cout != cin:
                raise ConfigurationError("depthwise conv requires out_channels == in_channels")


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    """Closed-form output length of a conv/pool window along one axis."""
    return (size + 2 * padding - kernel) // stride + 1


def _check_spatial(x: torch.Tensor, kh: int, kw: int, stride: int, padding: int, what: str):
    _, _, h, w = x.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ConfigurationError(
            f"{what}: kernel {kh}x{kw}, stride {stride}, padding {padding} "
            f"gives non-positive output for input {h}x{w}"
        )


def conv2d_forward(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation of ``x`` (N, Cin, H, W) with ``weight`` (Cout, Cin, Kh, Kw)."""
    TensorShape.of(x)
    if weight.dim() != 4:
        raise ShapeError(f"conv weight must be rank 4, got {tuple(weight.shape)}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv expects {weight.shape[1]} input channels, got {x.shape[1]}")
    _check_spatial(x, weight.shape[2], weight.shape[3], stride, padding, "conv2d")
    return F.conv2d(x, weight, bias, stride=stride, padding=padding)


def depthwise_conv2d_forward(x, weight, bias=None, stride=1, padding=0):
    """Per-channel convolution; ``weight`` has shape (C, 1, Kh, Kw)."""
    TensorShape.of(x)
    c = x.shape[1]
    if weight.dim() != 4 or weight.shape[0] != c or weight.shape[1] != 1:
        raise ShapeError(
            f"depthwise weight must be ({c}, 1, Kh, Kw) for {c} channels, got {tuple(weight.shape)}"
        )
    _check_spatial(x, weight.shape[2], weight.shape[3], stride, padding, "depthwise_conv2d")
    return F.conv2d(x, weight, bias, stride=stride, padding=padding, groups=c)


def batch_norm_forward(x, gamma, beta, running_mean, running_var, training,
                       momentum=BN_MOMENTUM, eps=BN_EPS):
    """Per-channel batch normalisation.

    In training mode the batch statistics normalise the input and the running
    statistics are updated in place with ``momentum``; in eval mode the running
    statistics are used.
    """
    TensorShape.of(x)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch norm expects gamma/beta of length {c}")
    if training and x.shape[0] * x.shape[2] * x.shape[3] <= 1:
        raise ConfigurationError("batch norm in train mode needs more than one value per channel")
    return F.batch_norm(x, running_mean, running_var, gamma, beta, training, momentum, eps)


def pool_forward(x, kind, window=None, stride=None, padding=0):
    """Max, average or global-average pooling."""
    TensorShape.of(x)
    if kind == "global_avg":
        return x.mean(dim=(2, 3), keepdim=True)
    if kind not in ("max", "avg"):
        raise ConfigurationError(f"unknown pool kind {kind!r}")
    if window is None:
        raise ConfigurationError(f"{kind} pool needs a window")
    stride = window if stride is None else stride
    h, w = x.shape[2:]
    if window > h + 2 * padding or window > w + 2 * padding:
        raise ConfigurationError(f"pool window {window} exceeds input {h}x{w}")
    if kind == "max":
        return F.max_pool2d(x, window, stride, padding)
    return F.avg_pool2d(x, window, stride, padding)


def linear_forward(x, weight, bias=None):
    if x.dim() != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"linear expects (N, {weight.shape[1]}) input, got {tuple(x.shape)}"
        )
    return F.linear(x, weight, bias)


def softmax_tau(logits, tau=1.0, dim=-1):
    """Temperature-softened softmax, ``softmax(logits / tau)``."""
    if not tau > 0:
        raise DomainError(f"temperature must be > 0, got {tau}")
    z = logits / tau
    # explicit max shift; F.softmax does the same internally
    z = z - z.amax(dim=dim, keepdim=True).detach()
    return F.softmax(z, dim=dim)


def log_softmax_tau(logits, tau=1.0, dim=-1):
    if not tau > 0:
        raise DomainError(f"temperature must be > 0, got {tau}")
    return F.log_softmax(logits / tau, dim=dim)


def concat_channels(*maps):
    ref = maps[0]
    for m in maps[1:]:
        if m.shape[0] != ref.shape[0] or m.shape[2:] != ref.shape[2:]:
            raise ShapeError(
                f"cannot concatenate {tuple(ref.shape)} with {tuple(m.shape)} along channels"
            )
    return torch.cat(maps, dim=1)


def add(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"cannot add {tuple(a.shape)} and {tuple(b.shape)}")
    return a + b


def backward(loss):
    """Accumulate d(loss)/d(parameter) into ``.grad`` of every reachable parameter."""
    if not isinstance(loss, torch.Tensor) or loss.numel() != 1:
        raise StateError("backward needs a scalar loss tensor")
    if loss.grad_fn is None:
        raise StateError("loss has no recorded computation; run a forward pass first")
    if not torch.isfinite(loss).all():
        raise FloatingPointError(f"non-finite loss {loss.item()}")
    loss.backward()


# ---------------------------------------------------------------------------
# module wrappers


class Conv2d(nn.Conv2d):
    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0, bias=False):
        super().__init__(in_channels, out_channels, kernel_size, stride, padding, bias=bias)

    @property
    def spec(self) -> LayerSpec:
        return LayerSpec("conv2d", dict(
            in_channels=self.in_channels, out_channels=self.out_channels,
            kernel=self.kernel_size, stride=self.stride[0], padding=self.padding[0],
        ))

    def forward(self, x):
        return conv2d_forward(x, self.weight, self.bias, self.stride[0], self.padding[0])


class DepthwiseConv2d(nn.Conv2d):
    def __init__(self, channels, kernel_size=3, stride=1, padding=1, bias=False):
        super().__init__(channels, channels, kernel_size, stride, padding, groups=channels, bias=bias)

    @property
    def spec(self) -> LayerSpec:
        return LayerSpec("depthwise_conv2d", dict(
            in_channels=self.in_channels, out_channels=self.out_channels,
            kernel=self.kernel_size, stride=self.stride[0], padding=self.padding[0],
        ))

    def forward(self, x):
        return depthwise_conv2d_forward(x, self.weight, self.bias, self.stride[0], self.padding[0])


class BatchNorm2d(nn.BatchNorm2d):
    def __init__(self, num_features):
        super().__init__(num_features, eps=BN_EPS, momentum=BN_MOMENTUM)

    @property
    def spec(self) -> LayerSpec:
        return LayerSpec("batch_norm", dict(num_features=self.num_features))

    def forward(self, x):
        if x.dim() == 4 and x.shape[1] != self.num_features:
            raise ShapeError(f"batch norm expects {self.num_features} channels, got {x.shape[1]}")
        if self.training:
            self.num_batches_tracked.add_(1)
        return batch_norm_forward(x, self.weight, self.bias, self.running_mean,
                                  self.running_var, self.training, self.momentum, self.eps)


class ReLU6(nn.ReLU6):
    spec = LayerSpec("relu6")


class ReLU(nn.ReLU):
    spec = LayerSpec("relu")


class MaxPool2d(nn.Module):
    def __init__(self, window, stride=None, padding=0):
        super().__init__()
        self.window, self.stride, self.padding = window, window if stride is None else stride, padding

    @property
    def spec(self) -> LayerSpec:
        return LayerSpec("max_pool", dict(window=self.window, stride=self.stride, padding=self.padding))

    def forward(self, x):
        return pool_forward(x, "max", self.window, self.stride, self.padding)


class AvgPool2d(MaxPool2d):
    @property
    def spec(self) -> LayerSpec:
        return LayerSpec("avg_pool", dict(window=self.window, stride=self.stride, padding=self.padding))

    def forward(self, x):
        return pool_forward(x, "avg", self.window, self.stride, self.padding)


class GlobalAvgPool(nn.Module):
    """(N, C, H, W) -> (N, C) channel means."""

    spec = LayerSpec("global_avg_pool")

    def forward(self, x):
        return pool_forward(x, "global_avg").flatten(1)


class Linear(nn.Linear):
    @property
    def spec(self) -> LayerSpec:
        return LayerSpec("linear", dict(in_features=self.in_features, out_features=self.out_features))

    def forward(self, x):
        return linear_forward(x, self.weight, self.bias)


def init_weights(module: nn.Module, generator: torch.Generator | None = None) -> None:
    """Fan-out scaled Gaussian for conv weights, N(0, 0.01) for linear layers,
    unit/zero BN affine, zero biases.

    A fan-out rule on a classifier with two outputs would give unit-variance
    weights and initial logits in the hundreds, hence the small linear init.
    Draws happen in ``module.modules()`` order so a fixed generator state gives
    a fixed network.
    """
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            if isinstance(m, nn.Conv2d):
                fan_out = m.out_channels * m.kernel_size[0] * m.kernel_size[1] // m.groups
                std = math.sqrt(2.0 / fan_out)
            else:
                std = 0.01
            nn.init.normal_(m.weight, 0.0, std, generator=generator)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
            m.reset_running_stats()
