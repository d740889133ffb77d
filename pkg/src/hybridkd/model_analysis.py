"""Parameter and MAC accounting, Grad-CAM heatmaps, and report files.

MAC conventions (one multiply-accumulate is reported as one FLOP)::

    conv       Cout * Cin * Kh * Kw * Hout * Wout
    depthwise  C * Kh * Kw * Hout * Wout
    linear     in * out
    BN, activations, pooling, add, concat: 0

Auxiliary branches are tallied separately and never enter headline totals.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .nn_core import ConfigurationError

AUX = "aux"


def _group(name: str) -> str:
    """Report group of a parameter/module name: its top-level child."""
    top = name.split(".", 1)[0]
    if top in ("fc", "pool"):
        return "head"
    return top


@dataclass
class ReportRow:
    name: str
    kind: str
    stage: str
    count: int


@dataclass
class ParamReport:
    rows: list[ReportRow]
    stage_totals: dict[str, int]
    backbone_total: int
    head_total: int
    aux_total: int

    @property
    def main_total(self) -> int:
        return self.backbone_total + self.head_total


@dataclass
class FlopReport:
    rows: list[ReportRow]
    stage_totals: dict[str, int]
    main_total: int
    aux_total: int
    input_size: tuple[int, int]
    convention: str = "1 MAC = 1 FLOP; BN/activation/pool counted as 0"

    @property
    def main_gflops(self) -> float:
        return self.main_total / 1e9


def _kind(module: nn.Module) -> str:
    spec = getattr(module, "spec", None)
    if spec is not None:
        return spec.kind
    if isinstance(module, nn.Conv2d):
        return "depthwise_conv2d" if module.groups > 1 else "conv2d"
    if isinstance(module, nn.BatchNorm2d):
        return "batch_norm"
    if isinstance(module, nn.Linear):
        return "linear"
    return type(module).__name__.lower()


def count_params(network: nn.Module) -> ParamReport:
    """Trainable values per leaf module, grouped by top-level child."""
    rows = []
    for name, module in network.named_modules():
        own = [p for p in module.parameters(recurse=False) if p.requires_grad]
        if not own:
            continue
        rows.append(ReportRow(name, _kind(module), _group(name), sum(p.numel() for p in own)))
    stage_totals: dict[str, int] = {}
    for r in rows:
        stage_totals[r.stage] = stage_totals.get(r.stage, 0) + r.count
    aux = stage_totals.get(AUX, 0)
    head = stage_totals.get("head", 0)
    backbone = sum(v for k, v in stage_totals.items() if k not in (AUX, "head"))
    return ParamReport(rows, stage_totals, backbone, head, aux)


def mac_of(module: nn.Module, out: torch.Tensor) -> int:
    if isinstance(module, nn.Conv2d):
        kh, kw = module.kernel_size
        cin_per_group = module.in_channels // module.groups
        return module.out_channels * cin_per_group * kh * kw * out.shape[2] * out.shape[3]
    if isinstance(module, nn.Linear):
        return module.in_features * module.out_features
    return 0


def count_macs(network: nn.Module, input_size=(224, 224)) -> FlopReport:
    """Walk one forward pass (batch 1, eval mode) and tally per-layer MACs."""
    rows: list[ReportRow] = []
    hooks = []

    def hook(name):
        def fn(module, inputs, output):
            rows.append(ReportRow(name, _kind(module), _group(name), mac_of(module, output)))
        return fn

    for name, module in network.named_modules():
        if next(module.children(), None) is None and name:
            hooks.append(module.register_forward_hook(hook(name)))
    was_training = network.training
    network.eval()
    try:
        with torch.no_grad():
            network(torch.zeros(1, 3, *input_size))
    finally:
        network.train(was_training)
        for h in hooks:
            h.remove()
    stage_totals: dict[str, int] = {}
    for r in rows:
        stage_totals[r.stage] = stage_totals.get(r.stage, 0) + r.count
    aux = stage_totals.get(AUX, 0)
    main = sum(v for k, v in stage_totals.items() if k != AUX)
    return FlopReport(rows, stage_totals, main, aux, tuple(input_size))


# ---------------------------------------------------------------------------
# Grad-CAM


@dataclass
class GradCamMap:
    raw: np.ndarray
    normalized: np.ndarray
    target_class: int
    channel_weights: np.ndarray = field(repr=False, default=None)


def _resolve_layer(network: nn.Module, layer) -> nn.Module:
    if isinstance(layer, nn.Module):
        return layer
    modules = dict(network.named_modules())
    if layer not in modules:
        raise ConfigurationError(f"network has no layer named {layer!r}")
    return modules[layer]


def default_target_layer(network: nn.Module) -> str:
    names = dict(network.named_children())
    for candidate in ("stage4", "layer4"):
        if candidate in names:
            return candidate
    raise ConfigurationError("no default Grad-CAM layer; pass target_layer explicitly")


def _logits(out, head: str):
    if isinstance(out, torch.Tensor):
        return out
    return out.main_logits if head == "main" else out.aux_logits


def grad_cam(network: nn.Module, image: torch.Tensor, target_class: int | None = None,
             target_layer=None, head: str = "main") -> GradCamMap:
    """Class activation map for one image (3, H, W) or (1, 3, H, W).

    Channel weights are the spatial means of d(logit)/d(activation); the raw map
    is the rectified weighted channel sum at the layer's resolution. The
    normalised map is bilinearly upsampled to the input size and min-max
    scaled to [0, 1]; an all-zero map stays all-zero.
    """
    if image.dim() == 3:
        image = image.unsqueeze(0)
    if image.dim() != 4 or image.shape[0] != 1:
        raise ConfigurationError("grad_cam takes a single image")
    layer = _resolve_layer(network, target_layer if target_layer is not None
                           else default_target_layer(network))
    captured = {}

    def keep(module, inputs, output):
        if not isinstance(output, torch.Tensor) or output.dim() != 4:
            raise ConfigurationError("Grad-CAM target layer must output a (N, C, H, W) map")
        captured["act"] = output

    handle = layer.register_forward_hook(keep)
    was_training = network.training
    network.eval()
    try:
        with torch.enable_grad():
            logits = _logits(network(image), head)
            if target_class is None:
                target_class = int(logits[0].argmax())
            if not 0 <= target_class < logits.shape[1]:
                raise ConfigurationError(f"class index {target_class} out of range")
            if "act" not in captured:
                raise ConfigurationError("target layer was not reached in the forward pass")
            act = captured["act"]
            grad, = torch.autograd.grad(logits[0, target_class], act, allow_unused=True)
    finally:
        handle.remove()
        network.train(was_training)
    act = act.detach()
    if grad is None:
        grad = torch.zeros_like(act)
    weights = grad.mean(dim=(2, 3), keepdim=True)
    raw = F.relu((weights * act).sum(dim=1, keepdim=True))
    up = F.interpolate(raw, size=image.shape[-2:], mode="bilinear", align_corners=False)[0, 0]
    lo, hi = up.min(), up.max()
    if hi <= 0:
        norm = torch.zeros_like(up)
    elif hi - lo > 0:
        norm = (up - lo) / (hi - lo)
    else:
        norm = torch.ones_like(up)
    return GradCamMap(raw[0, 0].numpy(), norm.clamp(0, 1).numpy(), target_class,
                      weights.flatten().numpy())


# ---------------------------------------------------------------------------
# report files


def write_param_csv(report: ParamReport, path) -> None:
    _write_rows(report.rows, path, "count")


def write_flop_csv(report: FlopReport, path) -> None:
    _write_rows(report.rows, path, "macs")


def _write_rows(rows, path, value_col):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["name", "kind", "stage", value_col])
        for r in rows:
            w.writerow([r.name, r.kind, r.stage, r.count])


def read_report_csv(path) -> list[ReportRow]:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        return [ReportRow(n, k, s, int(c)) for n, k, s, c in reader]


def write_pgm(array: np.ndarray, path) -> None:
    """Binary (P5) 8-bit grayscale image of a map with values in [0, 1]."""
    arr = np.clip(np.rint(np.asarray(array, dtype=np.float64) * 255), 0, 255).astype(np.uint8)
    h, w = arr.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + arr.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path} is not a binary PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def write_map_csv(array: np.ndarray, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in np.asarray(array):
            w.writerow([f"{v:.8g}" for v in row])


def emit_reports(out_dir, params: dict[str, ParamReport] | None = None,
                 flops: dict[str, FlopReport] | None = None,
                 maps: dict[str, GradCamMap] | None = None) -> list[Path]:
    """Write ``<name>_params.csv``, ``<name>_flops.csv`` and heatmap PGM/CSV files."""
    out_dir = Path(out_dir)
    written = []
    for name, rep in (params or {}).items():
        p = out_dir / f"{name}_params.csv"
        write_param_csv(rep, p)
        written.append(p)
    for name, rep in (flops or {}).items():
        p = out_dir / f"{name}_flops.csv"
        write_flop_csv(rep, p)
        written.append(p)
    for name, cam in (maps or {}).items():
        pgm, raw = out_dir / f"{name}.pgm", out_dir / f"{name}_raw.csv"
        write_pgm(cam.normalized, pgm)
        write_map_csv(cam.raw, raw)
        written += [pgm, raw]
    return written
