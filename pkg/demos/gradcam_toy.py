"""
Where does the student look?
============================

Trains a student briefly on the toy set, then asks Grad-CAM which regions
drive its decision. The heatmap is written as a PGM image next to this script.
"""

from pathlib import Path

import numpy as np
import torch

from hybridkd import build_student
from hybridkd.data_pipeline import (
    AugmentationSpec, assign_splits, augment_and_batch, make_toy_dataset,
)
from hybridkd.distill_objectives import hard_loss
from hybridkd.model_analysis import grad_cam, write_pgm
from hybridkd.train_engine import make_optimizer

manifest = assign_splits(make_toy_dataset(2, 60, 64, seed=3), (0.8, 0.1, 0.1), seed=0)
spec = AugmentationSpec(resize=64)
student = build_student(2, generator=torch.Generator().manual_seed(0))
opt = make_optimizer(student.parameters(), "adam", 1e-3)

# A couple of supervised epochs are enough for the colour cue.
for epoch in range(2):
    for batch in augment_and_batch(manifest, "train", spec, 16, seed=0, epoch=epoch):
        student.train()
        opt.zero_grad()
        hard_loss(student(batch.images), batch.labels).backward()
        opt.step()

batch = next(augment_and_batch(manifest, "test", spec, 1, seed=0, epoch=0))
cam = grad_cam(student, batch.images[0], target_class=int(batch.labels[0]))
print("label", int(batch.labels[0]), "raw map", cam.raw.shape, "upsampled", cam.normalized.shape)

# The patch is where the colour is; compare attention inside and outside it.
img = manifest.arrays[batch.paths[0]]
patch = np.abs(img - 0.5).max(axis=0) > 0.3
print(f"mean attention inside patch {cam.normalized[patch].mean():.3f}, "
      f"outside {cam.normalized[~patch].mean():.3f}")

out = Path(__file__).with_name("gradcam_toy.pgm")
write_pgm(cam.normalized, out)
print("wrote", out)
