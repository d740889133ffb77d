"""
Counting what the student costs
===============================

Builds the dense inverted-residual student and the residual teacher, then
walks through where their parameters and multiply-accumulates live.
"""

import torch

from hybridkd import build_student, build_teacher
from hybridkd.model_analysis import count_macs, count_params

# Two classes, as in the seed-purity and leaf tasks.
student = build_student(2, generator=torch.Generator().manual_seed(0))
teacher = build_teacher(2, generator=torch.Generator().manual_seed(0))

# Parameters are grouped by the top-level child of each network.
# The auxiliary branches are training-time scaffolding, so they are listed
# but kept out of the headline totals.
ps = count_params(student)
print("student parameters by stage")
for stage, n in ps.stage_totals.items():
    print(f"  {stage:7s} {n:>10,d}")
print(f"  backbone {ps.backbone_total:,d}, head {ps.head_total:,d}, aux {ps.aux_total:,d}")

pt = count_params(teacher)
print(f"teacher main path: {pt.main_total:,d} parameters")

# MACs come from one forward pass at 224x224 with a hook on every leaf layer.
# Batch norm, activations and pooling count as zero; one MAC is one "FLOP".
fs, ft = count_macs(student), count_macs(teacher)
print(f"student {fs.main_gflops:.3f} GMACs, teacher {ft.main_gflops:.3f} GMACs")
print(f"teacher/student: {pt.main_total / ps.main_total:.2f}x parameters, "
      f"{ft.main_total / fs.main_total:.2f}x MACs")

# The stem convolution alone: 64 * 3 * 7 * 7 * 112 * 112.
stem = next(r for r in fs.rows if r.name == "stem.0")
print(f"stem conv: {stem.count:,d} MACs")

# Channel growth through the dense stages: every block appends 16 channels.
trace = []
with torch.no_grad():
    student.eval().features(torch.zeros(1, 3, 224, 224), trace)
print("stage outputs:", trace)
