"""Command-line entry point: ``hybridkd {train,eval,analyze,gradcam}``.

Exit codes: 0 ok, 1 configuration error, 2 data/image error, 3 non-finite
loss, 4 checkpoint error.

Output layout under ``--out``::

    metrics.csv  config.resolved.json  manifest.json  checkpoints/best.kdf
    eval.csv  analysis/  gradcam/
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import config as cfgmod
from .config import RunConfig
from .data_pipeline import (
    DataError, DatasetManifest, Normalization, assign_splits, augment_and_batch,
    build_one_vs_rest, dataset_normalization, make_toy_dataset, save_manifest, scan_image_folder,
)
from .model_analysis import count_macs, count_params, emit_reports, grad_cam
from .nn_core import ConfigurationError
from .student_net import build_student
from .teacher_net import build_teacher
from .train_engine import (
    CheckpointFormatError, NonFiniteLossError, evaluate, fit, load_checkpoint, restore_networks,
)

log = logging.getLogger("hybridkd")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_CHECKPOINT = 0, 1, 2, 3, 4

REFERENCE_FIGURES = {
    "student_params_m": 1.07,
    "teacher_params_m": 11.18,
    "student_gflops": 0.68,
    "teacher_gflops": 1.82,
    "param_ratio": 10.4,
    "flop_ratio": 2.7,
}


class CheckpointError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# shared helpers


def build_manifest(cfg: RunConfig) -> DatasetManifest:
    if cfg.toy is not None:
        t = cfg.toy
        manifest = make_toy_dataset(t.num_classes, t.per_class, t.image_size, t.seed)
    else:
        manifest = scan_image_folder(cfg.dataset_root)
    if cfg.one_vs_rest is not None:
        manifest = build_one_vs_rest(manifest, cfg.one_vs_rest)
    return assign_splits(manifest, cfg.split_ratios, cfg.split_seed)


def resolve_normalization(cfg: RunConfig, manifest: DatasetManifest | None) -> tuple[RunConfig, Normalization]:
    if cfg.normalization == "fixed":
        return cfg, Normalization()
    if cfg.normalization_mean is None or cfg.normalization_std is None:
        if manifest is None:
            raise ConfigurationError("dataset normalization statistics are not recorded in the config")
        norm = dataset_normalization(manifest, "train", cfg.augmentation.resize)
        cfg = replace(cfg, normalization_mean=norm.mean, normalization_std=norm.std)
    return cfg, Normalization(tuple(cfg.normalization_mean), tuple(cfg.normalization_std))


def build_networks(cfg: RunConfig, num_classes: int):
    gen = torch.Generator().manual_seed(cfg.train.seed)
    teacher = build_teacher(num_classes, generator=gen)
    student = build_student(num_classes, generator=gen)
    return teacher, student


def loader(manifest, split, cfg: RunConfig, norm: Normalization):
    def batches(epoch: int):
        return augment_and_batch(manifest, split, cfg.augmentation, cfg.train.batch_size,
                                 cfg.train.seed, epoch, norm)
    return batches


def _load_ckpt(path):
    try:
        return load_checkpoint(path)
    except (OSError, CheckpointFormatError) as exc:
        raise CheckpointError(f"cannot load checkpoint {path}: {exc}") from exc


def _restore(record, teacher, student):
    try:
        restore_networks(record, teacher, student)
    except (KeyError, RuntimeError) as exc:
        raise CheckpointError(f"checkpoint does not match the networks: {exc}") from exc


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_train(cfg: RunConfig) -> int:
    cfg.validate("train")
    manifest = build_manifest(cfg)
    cfg, norm = resolve_normalization(cfg, manifest)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.resolved.json", cfgmod.to_dict(cfg))
    save_manifest(manifest, out / "manifest.json")
    torch.manual_seed(cfg.train.seed)
    teacher, student = build_networks(cfg, manifest.num_classes)
    result = fit(teacher, student, loader(manifest, "train", cfg, norm),
                 loader(manifest, "val", cfg, norm), cfg.train,
                 checkpoint_dir=out / "checkpoints", metrics_path=out / "metrics.csv")
    print(f"epochs run: {len(result.history)}  best epoch: {result.best_epoch}  "
          f"student main val accuracy: {result.best_accuracy:.4f}")
    print(f"checkpoint: {result.checkpoint_path}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, split: str = "test") -> int:
    cfg.validate("eval")
    record = _load_ckpt(cfg.checkpoint)
    manifest = build_manifest(cfg)
    cfg, norm = resolve_normalization(cfg, manifest)
    teacher, student = build_networks(cfg, manifest.num_classes)
    _restore(record, teacher, student)
    batches = list(augment_and_batch(manifest, split, cfg.augmentation, cfg.train.batch_size,
                                     cfg.train.seed, 0, norm, train=False))
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for net_name, net in (("teacher", teacher), ("student", student)):
        for head, r in evaluate(net, batches).items():
            rows.append([net_name, head, split, f"{r['loss']:.8g}", f"{r['accuracy']:.8g}"])
            print(f"{net_name:8s} {head:4s} {split:5s} loss {r['loss']:.4f}  accuracy {r['accuracy']:.4f}")
    with (out / "eval.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["net", "head", "split", "loss", "accuracy"])
        w.writerows(rows)
    return EXIT_OK


def analysis_summary(num_classes: int, input_size: int = 224):
    student, teacher = build_student(num_classes), build_teacher(num_classes)
    ps, pt = count_params(student), count_params(teacher)
    fs, ft = count_macs(student, (input_size, input_size)), count_macs(teacher, (input_size, input_size))
    lines = [
        f"classes: {num_classes}  input: {input_size}x{input_size}",
        "student stage parameters (M): " + ", ".join(
            f"{k}={v / 1e6:.3f}" for k, v in ps.stage_totals.items() if k not in ("aux",)),
        f"student backbone parameters: {ps.backbone_total / 1e6:.3f}M  head: {ps.head_total}  "
        f"aux (excluded): {ps.aux_total / 1e6:.3f}M  [reference ~{REFERENCE_FIGURES['student_params_m']}M]",
        f"teacher main-path parameters: {pt.main_total / 1e6:.3f}M  aux (excluded): "
        f"{pt.aux_total / 1e6:.3f}M  [reference {REFERENCE_FIGURES['teacher_params_m']}M]",
        f"student main-path GFLOPs (GMACs): {fs.main_gflops:.3f}  aux: {fs.aux_total / 1e9:.4f}  "
        f"[reference {REFERENCE_FIGURES['student_gflops']}]",
        f"teacher main-path GFLOPs (GMACs): {ft.main_gflops:.3f}  aux: {ft.aux_total / 1e9:.4f}  "
        f"[reference {REFERENCE_FIGURES['teacher_gflops']}]",
        f"param ratio teacher/student: {pt.main_total / ps.main_total:.2f}x  "
        f"[reference ~{REFERENCE_FIGURES['param_ratio']}x]",
        f"MAC ratio teacher/student: {ft.main_total / fs.main_total:.2f}x  "
        f"[reference ~{REFERENCE_FIGURES['flop_ratio']}x]",
    ]
    return {"student": ps, "teacher": pt}, {"student": fs, "teacher": ft}, lines


def cmd_analyze(cfg: RunConfig) -> int:
    cfg.validate("analyze")
    params, flops, lines = analysis_summary(cfg.num_classes, cfg.augmentation.resize)
    out = Path(cfg.output_dir) / "analysis"
    emit_reports(out, params=params, flops=flops)
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


def _load_input_image(path, size, norm: Normalization) -> torch.Tensor:
    from PIL import Image, UnidentifiedImageError
    import torchvision.transforms.functional as TF
    from torchvision.transforms import InterpolationMode

    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except (OSError, UnidentifiedImageError) as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc
    img = torch.from_numpy(arr).permute(2, 0, 1).contiguous()
    img = TF.resize(img, [size, size], InterpolationMode.BILINEAR, antialias=False)
    return norm.apply(img.unsqueeze(0))


def cmd_gradcam(cfg: RunConfig) -> int:
    cfg.validate("gradcam")
    record = _load_ckpt(cfg.checkpoint)
    cfg, norm = resolve_normalization(cfg, None)
    size = cfg.augmentation.resize
    image = _load_input_image(cfg.image, size, norm)
    teacher, student = build_networks(cfg, cfg.num_classes)
    _restore(record, teacher, student)
    maps = {}
    for net_name, net in (("teacher", teacher), ("student", student)):
        for head in ("main", "aux"):
            layer = None if head == "main" else "aux.align"
            maps[f"{net_name}_{head}"] = grad_cam(net, image, cfg.class_index, layer, head)
    out = Path(cfg.output_dir) / "gradcam"
    emit_reports(out, maps=maps)
    for name, cam in maps.items():
        print(f"{name}: class {cam.target_class}  raw {cam.raw.shape}  map {cam.normalized.shape}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument handling


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hybridkd", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--preset", choices=sorted(cfgmod.PRESETS))
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--toy", action="store_true", help="use the synthetic toy dataset preset")
    common.add_argument("--checkpoint")
    common.add_argument("--data", help="image-folder dataset root")
    common.add_argument("--num-classes", type=int)
    common.add_argument("-v", "--verbose", action="store_true")
    sub.add_parser("train", parents=[common], help="sequential online distillation")
    p_eval = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p_eval.add_argument("--split", default="test", choices=("train", "val", "test"))
    sub.add_parser("analyze", parents=[common], help="parameter / MAC reports")
    p_cam = sub.add_parser("gradcam", parents=[common], help="Grad-CAM heatmaps")
    p_cam.add_argument("--image")
    p_cam.add_argument("--class", dest="class_index", type=int)
    return parser


def config_from_args(args) -> RunConfig:
    preset = args.preset
    if args.toy:
        if preset not in (None, "toy"):
            raise ConfigurationError("--toy cannot be combined with another preset")
        preset = "toy"
    overrides: dict = {}
    if args.out:
        overrides["output_dir"] = args.out
    if args.checkpoint:
        overrides["checkpoint"] = args.checkpoint
    if args.data:
        overrides["dataset_root"] = args.data
    if args.num_classes is not None:
        overrides["num_classes"] = args.num_classes
    if getattr(args, "image", None):
        overrides["image"] = args.image
    if getattr(args, "class_index", None) is not None:
        overrides["class_index"] = args.class_index
    cfg = cfgmod.resolve(preset, args.config, overrides)
    if args.seed is not None:
        cfg = cfgmod.with_seed(cfg, args.seed)
    if cfg.toy is not None and args.num_classes is None:
        cfg = replace(cfg, num_classes=cfg.toy.num_classes)
    return cfg


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.split)
        if args.command == "analyze":
            return cmd_analyze(cfg)
        return cmd_gradcam(cfg)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NonFiniteLossError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT


if __name__ == "__main__":
    sys.exit(main())
