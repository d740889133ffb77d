"""
The four student loss terms on hand-made logits
===============================================

A small tour of the objective: hard labels, feature distance, response
matching against the teacher, and self-distillation from the auxiliary head.
"""

import math
from types import SimpleNamespace

import torch

from hybridkd.distill_objectives import LossWeights, kl_divergence, student_total

# Two samples, three classes. The student is unsure; the teacher is not.
student = SimpleNamespace(
    main_logits=torch.tensor([[0.5, 0.2, -0.1], [0.0, 0.3, 0.1]], requires_grad=True),
    aux_logits=torch.tensor([[0.9, 0.0, -0.4], [-0.2, 0.8, 0.0]], requires_grad=True),
    f_main=torch.randn(2, 512, generator=torch.Generator().manual_seed(0), requires_grad=True),
    f_aux=torch.randn(2, 352, generator=torch.Generator().manual_seed(1), requires_grad=True),
)
teacher = SimpleNamespace(
    main_logits=torch.tensor([[3.0, 0.0, -1.0], [-1.0, 2.5, 0.0]]),
    aux_logits=torch.tensor([[2.0, 0.5, -1.0], [-0.5, 2.0, 0.5]]),
    f_main=torch.zeros(2, 512),
    f_aux=torch.zeros(2, 352),
)
labels = torch.tensor([0, 1])

weights = LossWeights()  # 0.3 / 0.7 / 0.7 / 0.7, temperatures 4 and 4
parts = student_total(student, teacher, labels, weights)
for name, value in parts.as_floats().items():
    print(f"{name:13s} {value:.4f}")

# Temperature flattens both distributions, which shrinks the KL between them.
for tau in (1.0, 2.0, 4.0, 8.0):
    kl = kl_divergence(teacher.main_logits, student.main_logits, tau)
    print(f"tau={tau:<4} KL(teacher || student) = {kl.item():.5f}")

# The two-class case has a closed form worth checking by hand.
p = 1 / (1 + math.exp(-1))
closed = p * math.log(2 * p) + (1 - p) * math.log(2 * (1 - p))
got = kl_divergence(torch.tensor([[1.0, 0.0]]), torch.tensor([[0.0, 0.0]]), 1.0).item()
print(f"two-class KL: closed form {closed:.6f}, computed {got:.6f}")

# Gradients: the teacher is a fixed target and the aux head only mentors,
# so self-distillation sends nothing back into the aux logits.
parts.self_distill.backward()
print("aux grad from self-distillation:", student.aux_logits.grad)
