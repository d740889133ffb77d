"""18-layer residual teacher with a layer-3 auxiliary alignment head."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import torch
import torch.nn as nn

from . import nn_core as core
from .nn_core import BatchNorm2d, ConfigurationError, Conv2d, GlobalAvgPool, Linear, MaxPool2d, ReLU, ShapeError
from .student_net import AuxHead


class LoadError(RuntimeError):
    """A weight file could not be applied to a network."""


@dataclass(frozen=True)
class TeacherConfig:
    widths: tuple[int, ...] = (64, 128, 256, 512)
    blocks: tuple[int, ...] = (2, 2, 2, 2)
    aux_out_channels: int = 352
    aux_stage: int = 3
    pretrained_weights_path: str | None = None

    def __post_init__(self):
        if len(self.widths) != len(self.blocks) or min(self.blocks) <= 0:
            raise ConfigurationError(f"invalid teacher config: {self}")


class TeacherForwardBundle(NamedTuple):
    main_logits: torch.Tensor
    aux_logits: torch.Tensor
    f_main: torch.Tensor
    f_aux: torch.Tensor
    tap: torch.Tensor


class BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = Conv2d(cin, cout, 3, stride, 1)
        self.bn1 = BatchNorm2d(cout)
        self.relu = ReLU()
        self.conv2 = Conv2d(cout, cout, 3, 1, 1)
        self.bn2 = BatchNorm2d(cout)
        self.downsample = None
        if stride != 1 or cin != cout:
            self.downsample = nn.Sequential(Conv2d(cin, cout, 1, stride), BatchNorm2d(cout))

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(core.add(out, identity))


class TeacherNet(nn.Module):
    def __init__(self, num_classes: int, config: TeacherConfig = TeacherConfig()):
        super().__init__()
        if num_classes < 2:
            raise ConfigurationError(f"need at least 2 classes, got {num_classes}")
        self.num_classes = num_classes
        self.config = config
        self.stem = nn.Sequential(
            Conv2d(3, config.widths[0], 7, 2, 3), BatchNorm2d(config.widths[0]), ReLU(),
            MaxPool2d(3, 2, 1),
        )
        cin = config.widths[0]
        for i, (w, n) in enumerate(zip(config.widths, config.blocks), start=1):
            blocks = [BasicBlock(cin, w, 1 if i == 1 else 2)]
            blocks += [BasicBlock(w, w) for _ in range(n - 1)]
            self.add_module(f"layer{i}", nn.Sequential(*blocks))
            cin = w
        self.pool = GlobalAvgPool()
        self.fc = Linear(cin, num_classes)
        tap_channels = config.widths[config.aux_stage - 1]
        self.aux = AuxHead(tap_channels, config.aux_out_channels, num_classes, stride=2)

    @property
    def num_stages(self) -> int:
        return len(self.config.widths)

    def features(self, x, trace: list | None = None):
        if x.dim() != 4 or x.shape[1] != 3:
            raise ShapeError(f"teacher expects (N, 3, H, W) input, got {tuple(x.shape)}")
        x = self.stem(x)
        tap = None
        for i in range(1, self.num_stages + 1):
            x = getattr(self, f"layer{i}")(x)
            if trace is not None:
                trace.append(tuple(x.shape[1:]))
            if i == self.config.aux_stage:
                tap = x
        return x, tap

    def forward(self, x) -> TeacherForwardBundle:
        fmap, tap = self.features(x)
        f_main = self.pool(fmap)
        aux_logits, f_aux = self.aux(tap)
        return TeacherForwardBundle(self.fc(f_main), aux_logits, f_main, f_aux, tap)

    def deployment_modules(self):
        return [n for n, _ in self.named_children() if n != "aux"]


def build_teacher(num_classes: int, config: TeacherConfig | None = None,
                  generator: torch.Generator | None = None) -> TeacherNet:
    config = config or TeacherConfig()
    net = TeacherNet(num_classes, config)
    core.init_weights(net, generator)
    if config.pretrained_weights_path:
        load_pretrained(net, config.pretrained_weights_path)
    return net


def load_pretrained(network: nn.Module, path: str | Path, prefix: str = "") -> dict[str, list[str]]:
    """Overwrite matching tensors of ``network`` from a checkpoint file.

    Names are matched against ``network.state_dict()`` after stripping
    ``prefix`` from the file's names. Tensors missing from the file stay at
    their current values. Any shape conflict aborts before anything is copied.

    Returns ``{"loaded": [...], "skipped": [...], "unused": [...]}``.
    """
    from .train_engine import CheckpointFormatError, load_checkpoint

    try:
        record = load_checkpoint(path)
    except (OSError, CheckpointFormatError) as exc:
        raise LoadError(f"cannot read weights from {path}: {exc}") from exc
    available = {
        name[len(prefix):]: t for name, t in record.tensors.items() if name.startswith(prefix)
    }
    state = network.state_dict()
    loaded, skipped = [], []
    for name, dst in state.items():
        src = available.get(name)
        if src is None:
            skipped.append(name)
            continue
        if tuple(src.shape) != tuple(dst.shape):
            raise LoadError(
                f"shape conflict for {name}: file {tuple(src.shape)} vs network {tuple(dst.shape)}"
            )
        loaded.append(name)
    with torch.no_grad():
        for name in loaded:
            state[name].copy_(available[name].to(state[name].dtype))
    unused = sorted(set(available) - set(state))
    return {"loaded": loaded, "skipped": skipped, "unused": unused}
