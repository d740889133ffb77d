"""
Online distillation on the synthetic toy set
============================================

Trains teacher and student together on coloured-patch images. Each
mini-batch updates the teacher first and then trains the student against
the freshly updated teacher. Runs a few minutes on one CPU core.
"""

import torch

from hybridkd import build_student, build_teacher
from hybridkd.data_pipeline import (
    AugmentationSpec, assign_splits, augment_and_batch, dataset_normalization, make_toy_dataset,
)
from hybridkd.train_engine import TrainConfig, fit

# 2 classes x 200 images, 64 px. A red or green patch on gray, plus noise.
manifest = assign_splits(make_toy_dataset(2, 200, 64, seed=0), (0.8, 0.1, 0.1), seed=0)
print("train/val/test per class:",
      [manifest.class_counts(s) for s in ("train", "val", "test")])

# Normalise with the training split's own statistics.
norm = dataset_normalization(manifest, "train", 64)
spec = AugmentationSpec(resize=64, hflip=True)


def batches(split):
    return lambda epoch: augment_and_batch(manifest, split, spec, 32, seed=0, epoch=epoch,
                                           normalization=norm)


g = torch.Generator().manual_seed(0)
teacher, student = build_teacher(2, generator=g), build_student(2, generator=g)
config = TrainConfig(epochs=4, early_stop_patience=2, batch_size=32, learning_rate=1e-3)


def show(m):
    c = m.components["train"]
    print(f"epoch {m.epoch}: student val acc {m.accuracy():.3f}  "
          f"teacher val acc {m.accuracy('teacher'):.3f}  "
          f"hard {c['l_hard']:.3f} fd {c['l_fd']:.2f} rd {c['l_rd']:.4f} sd {c['l_sd']:.4f}")


result = fit(teacher, student, batches("train"), batches("val"), config, on_epoch=show)
print(f"best epoch {result.best_epoch}, student val accuracy {result.best_accuracy:.3f}")
