"""Sequential online distillation: training loop, evaluation, checkpoints, metrics.

Each mini-batch runs three phases in order:

1. teacher forward on the batch, teacher loss, backward, optimizer step;
2. a gradient-free teacher forward on the same batch in eval mode (running BN
   statistics) producing the targets for the student, so the targets already
   reflect the teacher update of phase 1;
3. student forward, four-term student loss, backward, optimizer step.
"""
from __future__ import annotations

import contextlib
import csv
import hashlib
import io
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import torch
import torch.nn as nn

from . import nn_core as core
from .distill_objectives import (
    FEATURE_METRICS, KL_DIRECTIONS, LossWeights, cross_entropy, student_total, teacher_loss,
)
from .nn_core import ConfigurationError

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"KDF1"
CHECKPOINT_VERSION = 1
METRICS_HEADER = ["epoch", "net", "head", "split", "loss", "accuracy", "l_hard", "l_fd", "l_rd", "l_sd"]
HEADS = ("main", "aux")


class NonFiniteLossError(FloatingPointError):
    """A loss evaluated to NaN/inf; the offending update was not applied."""


class CheckpointFormatError(ValueError):
    """Checkpoint bytes do not follow the KDF1 layout."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    optimizer: str = "adam"
    learning_rate: float = 1e-4
    # None means "same as learning_rate"
    teacher_learning_rate: float | None = None
    # None means 0 for adam and 1e-2 for adamw
    weight_decay: float | None = None
    early_stop_patience: int = 20
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    feature_metric: str = "euclidean"
    kl_direction: str = "target_first"
    target_mode: str = "post"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.early_stop_patience < 1:
            raise ConfigurationError("epochs, batch_size and patience must be positive")
        if self.early_stop_patience > self.epochs:
            raise ConfigurationError("early_stop_patience cannot exceed epochs")
        if self.optimizer not in ("adam", "adamw"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")
        if self.learning_rate < 0 or (self.teacher_learning_rate or 0) < 0:
            raise ConfigurationError("learning rates must be >= 0")
        if self.feature_metric not in FEATURE_METRICS:
            raise ConfigurationError(f"feature_metric must be one of {FEATURE_METRICS}")
        if self.kl_direction not in KL_DIRECTIONS:
            raise ConfigurationError(f"kl_direction must be one of {KL_DIRECTIONS}")
        if self.target_mode not in ("post", "pre"):
            raise ConfigurationError("target_mode must be 'post' or 'pre'")

    @property
    def resolved_weight_decay(self) -> float:
        if self.weight_decay is not None:
            return self.weight_decay
        return 1e-2 if self.optimizer == "adamw" else 0.0

    @property
    def resolved_teacher_lr(self) -> float:
        return self.learning_rate if self.teacher_learning_rate is None else self.teacher_learning_rate


def make_optimizer(params, kind: str, lr: float, weight_decay: float = 0.0) -> torch.optim.Optimizer:
    params = [p for p in params if p.requires_grad]
    if kind == "adam":
        # Adam adds the decay term to the gradient; AdamW decays the weights directly
        return torch.optim.Adam(params, lr=lr, weight_decay=weight_decay)
    if kind == "adamw":
        return torch.optim.AdamW(params, lr=lr, weight_decay=weight_decay)
    raise ConfigurationError(f"unknown optimizer {kind!r}")


def parameter_hash(network: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in network.named_parameters():
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@dataclass
class StepResult:
    teacher_loss: float
    teacher_logits: tuple[torch.Tensor, torch.Tensor]
    student: object  # LossBreakdown
    student_logits: tuple[torch.Tensor, torch.Tensor]
    teacher_hash_at_targets: str
    targets: object = None


def _teacher_targets(teacher: nn.Module, images):
    was_training = teacher.training
    teacher.eval()
    with torch.no_grad():
        out = teacher(images)
    teacher.train(was_training)
    return out


def _check_finite(loss, who):
    if not torch.isfinite(loss).all():
        raise NonFiniteLossError(f"{who} loss is not finite ({loss.detach().item()}); update skipped")


def train_step_sequential(teacher: nn.Module, student: nn.Module, images, labels,
                          config: TrainConfig, teacher_opt: torch.optim.Optimizer,
                          student_opt: torch.optim.Optimizer) -> StepResult:
    """One mini-batch: teacher update, teacher targets, student update."""
    teacher.train()
    student.train()
    pre_targets = _teacher_targets(teacher, images) if config.target_mode == "pre" else None

    t_out = teacher(images)
    lt = teacher_loss(t_out, labels)
    _check_finite(lt, "teacher")
    teacher_opt.zero_grad(set_to_none=False)
    core.backward(lt)
    teacher_opt.step()

    if pre_targets is None:
        targets = _teacher_targets(teacher, images)
    else:
        targets = pre_targets
    target_hash = parameter_hash(teacher)

    s_out = student(images)
    breakdown = student_total(s_out, targets, labels, config.loss_weights,
                              config.feature_metric, config.kl_direction)
    _check_finite(breakdown.total, "student")
    breakdown.teacher_total = lt.detach()
    student_opt.zero_grad(set_to_none=False)
    core.backward(breakdown.total)
    student_opt.step()
    return StepResult(
        lt.item(), (t_out.main_logits.detach(), t_out.aux_logits.detach()),
        breakdown, (s_out.main_logits.detach(), s_out.aux_logits.detach()),
        target_hash, targets,
    )


# ---------------------------------------------------------------------------
# evaluation


def _accuracy(logits, labels) -> int:
    # argmax returns the first maximal index, so ties go to the lower class
    return int((logits.argmax(dim=1) == labels).sum())


def evaluate(network: nn.Module, batches: Iterable) -> dict[str, dict[str, float]]:
    """Per-head mean cross entropy and accuracy in eval mode, without side effects."""
    was_training = network.training
    network.eval()
    loss = {h: 0.0 for h in HEADS}
    correct = {h: 0 for h in HEADS}
    n = 0
    try:
        with torch.no_grad():
            for images, labels, *_ in batches:
                out = network(images)
                for h, logits in zip(HEADS, (out.main_logits, out.aux_logits)):
                    loss[h] += float(cross_entropy(logits, labels)) * len(labels)
                    correct[h] += _accuracy(logits, labels)
                n += len(labels)
    finally:
        network.train(was_training)
    if n == 0:
        raise ConfigurationError("cannot evaluate on an empty dataset")
    return {h: {"loss": loss[h] / n, "accuracy": correct[h] / n} for h in HEADS}


def evaluate_pair(teacher, student, batches, config: TrainConfig):
    """Evaluate both networks on the same batches plus student loss components."""
    t_was, s_was = teacher.training, student.training
    teacher.eval()
    student.eval()
    stats = {net: {h: [0.0, 0] for h in HEADS} for net in ("teacher", "student")}
    comp = dict.fromkeys(("l_hard", "l_fd", "l_rd", "l_sd"), 0.0)
    n = 0
    try:
        with torch.no_grad():
            for images, labels, *_ in batches:
                t_out, s_out = teacher(images), student(images)
                for net, out in (("teacher", t_out), ("student", s_out)):
                    for h, logits in zip(HEADS, (out.main_logits, out.aux_logits)):
                        stats[net][h][0] += float(cross_entropy(logits, labels)) * len(labels)
                        stats[net][h][1] += _accuracy(logits, labels)
                b = student_total(s_out, t_out, labels, config.loss_weights,
                                  config.feature_metric, config.kl_direction)
                for key, v in zip(comp, (b.hard, b.feature, b.response, b.self_distill)):
                    comp[key] += float(v) * len(labels)
                n += len(labels)
    finally:
        teacher.train(t_was)
        student.train(s_was)
    if n == 0:
        raise ConfigurationError("cannot evaluate on an empty dataset")
    result = {net: {h: {"loss": v[0] / n, "accuracy": v[1] / n} for h, v in heads.items()}
              for net, heads in stats.items()}
    return result, {k: v / n for k, v in comp.items()}


# ---------------------------------------------------------------------------
# metrics


@dataclass
class EpochMetrics:
    epoch: int
    # results[net][split][head] = {"loss": ..., "accuracy": ...}
    results: dict
    # components[split] = {"l_hard": ..., "l_fd": ..., "l_rd": ..., "l_sd": ...}
    components: dict

    def accuracy(self, net="student", split="val", head="main") -> float:
        return self.results[net][split][head]["accuracy"]

    def loss(self, net="student", split="val", head="main") -> float:
        return self.results[net][split][head]["loss"]

    def csv_rows(self) -> list[list[str]]:
        rows = []
        for net in ("teacher", "student"):
            for head in HEADS:
                for split in ("train", "val"):
                    r = self.results[net][split][head]
                    comps = self.components[split] if net == "student" else {}
                    rows.append([str(self.epoch), net, head, split, _fmt(r["loss"]), _fmt(r["accuracy"])]
                                + [_fmt(comps[k]) if k in comps else "" for k in METRICS_HEADER[6:]])
        return rows


def _fmt(v: float) -> str:
    return f"{v:.8g}"


def write_metrics_csv(history: list[EpochMetrics], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for m in history:
            w.writerows(m.csv_rows())


# ---------------------------------------------------------------------------
# fit


@dataclass
class FitResult:
    history: list[EpochMetrics]
    best_epoch: int
    best_accuracy: float
    best_loss: float
    best_checkpoint: "CheckpointRecord"
    checkpoint_path: Path | None = None
    stopped_early: bool = False


def _run_epoch(teacher, student, batches, config, t_opt, s_opt):
    sums = {net: {h: [0.0, 0] for h in HEADS} for net in ("teacher", "student")}
    comp = dict.fromkeys(("l_hard", "l_fd", "l_rd", "l_sd"), 0.0)
    n = 0
    for images, labels, *_ in batches:
        res = train_step_sequential(teacher, student, images, labels, config, t_opt, s_opt)
        bs = len(labels)
        for net, logits in (("teacher", res.teacher_logits), ("student", res.student_logits)):
            for h, lg in zip(HEADS, logits):
                sums[net][h][0] += float(cross_entropy(lg, labels)) * bs
                sums[net][h][1] += _accuracy(lg, labels)
        b = res.student
        for key, v in zip(comp, (b.hard, b.feature, b.response, b.self_distill)):
            comp[key] += v.detach().item() * bs
        n += bs
    if n == 0:
        raise ConfigurationError("training split is empty")
    results = {net: {h: {"loss": v[0] / n, "accuracy": v[1] / n} for h, v in heads.items()}
               for net, heads in sums.items()}
    return results, {k: v / n for k, v in comp.items()}


def _denormals_flushed() -> bool:
    # a product that is only representable as a subnormal comes out as 0 when flushing
    return (torch.tensor([1e-30]) * torch.tensor([1e-10])).item() == 0.0


@contextlib.contextmanager
def flush_denormals():
    """Flush subnormal floats to zero inside the block, restoring the previous mode after.

    Subnormal activations and gradients otherwise slow CPU backward passes about 2x.
    """
    previous = _denormals_flushed()
    torch.set_flush_denormal(True)
    try:
        yield
    finally:
        torch.set_flush_denormal(previous)


def fit(teacher: nn.Module, student: nn.Module,
        train_batches: Callable[[int], Iterable], val_batches: Callable[[int], Iterable],
        config: TrainConfig, checkpoint_dir: str | Path | None = None,
        metrics_path: str | Path | None = None,
        on_epoch: Callable[[EpochMetrics], None] | None = None) -> FitResult:
    """Train both networks with early stopping on student main-head val accuracy.

    ``train_batches(epoch)`` and ``val_batches(epoch)`` return iterables of
    ``(images, labels, ...)``. The best weights (by val accuracy, ties broken
    by lower val loss) are restored into both networks at the end.
    """
    with flush_denormals():
        return _fit(teacher, student, train_batches, val_batches, config, checkpoint_dir,
                    metrics_path, on_epoch)


def _fit(teacher, student, train_batches, val_batches, config, checkpoint_dir, metrics_path,
         on_epoch) -> FitResult:
    t_opt = make_optimizer(teacher.parameters(), config.optimizer,
                           config.resolved_teacher_lr, config.resolved_weight_decay)
    s_opt = make_optimizer(student.parameters(), config.optimizer,
                           config.learning_rate, config.resolved_weight_decay)
    history: list[EpochMetrics] = []
    best = None
    best_acc, best_loss, best_epoch, since_best = -1.0, float("inf"), -1, 0
    stopped = False
    for epoch in range(config.epochs):
        train_res, train_comp = _run_epoch(teacher, student, train_batches(epoch), config, t_opt, s_opt)
        val_res, val_comp = evaluate_pair(teacher, student, val_batches(epoch), config)
        results = {net: {"train": train_res[net], "val": val_res[net]} for net in ("teacher", "student")}
        m = EpochMetrics(epoch, results, {"train": train_comp, "val": val_comp})
        history.append(m)
        if metrics_path is not None:
            write_metrics_csv(history, metrics_path)
        if on_epoch is not None:
            on_epoch(m)
        acc, loss = m.accuracy(), m.loss()
        log.info("epoch %d: student val acc %.4f loss %.4f | teacher val acc %.4f",
                 epoch, acc, loss, m.accuracy("teacher"))
        if acc > best_acc or (acc == best_acc and loss < best_loss):
            best_acc, best_loss, best_epoch, since_best = acc, loss, epoch, 0
            best = make_record(teacher, student, t_opt, s_opt,
                               {"epoch": epoch, "best_accuracy": acc, "best_loss": loss,
                                "seed": config.seed})
        else:
            since_best += 1
            if since_best >= config.early_stop_patience:
                stopped = True
                break
    ckpt_path = None
    if checkpoint_dir is not None:
        ckpt_path = Path(checkpoint_dir) / "best.kdf"
        save_checkpoint(best, ckpt_path)
    restore_networks(best, teacher, student)
    return FitResult(history, best_epoch, best_acc, best_loss, best, ckpt_path, stopped)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class CheckpointRecord:
    tensors: dict[str, torch.Tensor]
    state_tensors: dict[str, torch.Tensor] = field(default_factory=dict)
    state: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION


def _optimizer_tensors(opt: torch.optim.Optimizer, prefix: str) -> dict[str, torch.Tensor]:
    out = {}
    sd = opt.state_dict()
    for idx in sorted(sd["state"]):
        for key, val in sorted(sd["state"][idx].items()):
            out[f"{prefix}.{idx}.{key}"] = torch.as_tensor(val).detach().clone()
    return out


def make_record(teacher, student, t_opt=None, s_opt=None, state: dict | None = None) -> CheckpointRecord:
    tensors = {}
    for prefix, net in (("teacher", teacher), ("student", student)):
        if net is None:
            continue
        for name, t in net.state_dict().items():
            tensors[f"{prefix}.{name}"] = t.detach().clone()
    state_tensors = {}
    if t_opt is not None:
        state_tensors.update(_optimizer_tensors(t_opt, "opt.teacher"))
    if s_opt is not None:
        state_tensors.update(_optimizer_tensors(s_opt, "opt.student"))
    return CheckpointRecord(tensors, state_tensors, dict(state or {}))


def restore_networks(record: CheckpointRecord, teacher=None, student=None) -> None:
    for prefix, net in (("teacher", teacher), ("student", student)):
        if net is None:
            continue
        sd = net.state_dict()
        with torch.no_grad():
            for name, dst in sd.items():
                src = record.tensors[f"{prefix}.{name}"]
                dst.copy_(src.to(dst.dtype).reshape(dst.shape))


def _write_tensors(buf: io.BytesIO, tensors: dict[str, torch.Tensor]) -> None:
    buf.write(struct.pack("<I", len(tensors)))
    for name, t in tensors.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        dims = tuple(t.shape)
        buf.write(struct.pack(f"<I{len(dims)}I", len(dims), *dims))
        data = t.detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4", copy=False)
        buf.write(data.tobytes())


def encode_checkpoint(record: CheckpointRecord) -> bytes:
    """Serialise to the KDF1 layout.

    ``magic "KDF1" | u32 version | tensor table | state tensor table | u32 n | n bytes JSON``
    where a tensor table is ``u32 count`` followed by, per tensor,
    ``u32 name_len | name | u32 rank | u32 dims[rank] | f32 data``. All
    integers and floats are little-endian.
    """
    names = list(record.tensors) + list(record.state_tensors)
    if len(set(names)) != len(names):
        raise CheckpointFormatError("tensor names must be unique")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", record.version))
    _write_tensors(buf, record.tensors)
    _write_tensors(buf, record.state_tensors)
    meta = json.dumps(record.state, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointFormatError("checkpoint is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def tensors(self) -> dict[str, torch.Tensor]:
        import numpy as np

        out = {}
        for _ in range(self.u32()):
            name = self.take(self.u32()).decode("utf-8")
            rank = self.u32()
            dims = struct.unpack(f"<{rank}I", self.take(4 * rank))
            count = 1
            for d in dims:
                count *= d
            arr = np.frombuffer(self.take(4 * count), dtype="<f4").reshape(dims)
            if name in out:
                raise CheckpointFormatError(f"duplicate tensor name {name!r}")
            out[name] = torch.from_numpy(arr.astype(np.float32))
        return out


def decode_checkpoint(data: bytes) -> CheckpointRecord:
    r = _Reader(data)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointFormatError("bad magic bytes; not a KDF1 checkpoint")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    tensors = r.tensors()
    state_tensors = r.tensors()
    try:
        state = json.loads(r.take(r.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"corrupt training-state block: {exc}") from exc
    if r.pos != len(data):
        raise CheckpointFormatError("trailing bytes after checkpoint payload")
    return CheckpointRecord(tensors, state_tensors, state, version)


def save_checkpoint(record: CheckpointRecord, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(record))


def load_checkpoint(path: str | Path) -> CheckpointRecord:
    return decode_checkpoint(Path(path).read_bytes())
