"""Loss terms for online teacher/student training.

Student objective::

    total = l1 * hard + l2 * feature + l3 * response + l4 * self_distill

``hard``      cross entropy of both student heads against the labels
``feature``   distance between GAP feature vectors, student vs teacher, per head
``response``  KL(teacher || student) of temperature-softened outputs, per head
``self_distill``  KL(aux || main) of the student's own heads

Teacher targets and the student's aux mentor distribution are detached. No
``tau**2`` factor is applied to the KL terms.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

from .nn_core import DomainError, ShapeError, log_softmax_tau

FEATURE_METRICS = ("euclidean", "mse")
KL_DIRECTIONS = ("target_first", "learner_first")


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.3
    lambda2: float = 0.7
    lambda3: float = 0.7
    lambda4: float = 0.7
    tau: float = 4.0
    tau_prime: float = 4.0

    def __post_init__(self):
        for name in ("tau", "tau_prime"):
            if not getattr(self, name) > 0:
                raise DomainError(f"{name} must be > 0")
        for name in ("lambda1", "lambda2", "lambda3", "lambda4"):
            if getattr(self, name) < 0:
                raise DomainError(f"{name} must be >= 0")

    @classmethod
    def from_sequence(cls, values) -> "LossWeights":
        return cls(*map(float, values))

    def as_tuple(self) -> tuple[float, ...]:
        return tuple(asdict(self).values())


@dataclass
class LossBreakdown:
    hard: torch.Tensor
    feature: torch.Tensor
    response: torch.Tensor
    self_distill: torch.Tensor
    total: torch.Tensor
    teacher_total: torch.Tensor | None = None

    def as_floats(self) -> dict[str, float]:
        out = {k: v.detach().item() for k, v in
               (("hard", self.hard), ("feature", self.feature), ("response", self.response),
                ("self_distill", self.self_distill), ("total", self.total))}
        if self.teacher_total is not None:
            out["teacher_total"] = self.teacher_total.detach().item()
        return out


def cross_entropy(logits, labels):
    """Mean cross entropy of ``logits`` (N, C) against integer ``labels``."""
    labels = torch.as_tensor(labels, dtype=torch.long, device=logits.device)
    c = logits.shape[-1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= c):
        raise DomainError(f"labels must lie in [0, {c})")
    return F.nll_loss(F.log_softmax(logits, dim=-1), labels)


def teacher_loss(bundle, labels):
    return cross_entropy(bundle.main_logits, labels) + cross_entropy(bundle.aux_logits, labels)


def hard_loss(bundle, labels):
    return cross_entropy(bundle.main_logits, labels) + cross_entropy(bundle.aux_logits, labels)


def _feature_distance(fs, ft, metric):
    if fs.shape != ft.shape:
        raise ShapeError(f"feature vectors differ in shape: {tuple(fs.shape)} vs {tuple(ft.shape)}")
    diff = fs - ft.detach()
    if metric == "euclidean":
        # sqrt has an infinite derivative at 0; the clamp keeps gradients finite
        # when student and teacher agree exactly
        sq = diff.pow(2).sum(dim=1)
        return torch.where(sq > 0, sq.clamp_min(1e-30).sqrt(), sq).mean()
    if metric == "mse":
        return diff.pow(2).mean()
    raise ValueError(f"unknown feature metric {metric!r}; choose from {FEATURE_METRICS}")


def feature_distill(f_s_main, f_t_main, f_s_aux, f_t_aux, metric="euclidean"):
    """Per-sample L2 distance between GAP vectors, batch mean, summed over heads.

    ``metric="mse"`` switches to mean squared error (ablation variant).
    """
    return _feature_distance(f_s_main, f_t_main, metric) + _feature_distance(f_s_aux, f_t_aux, metric)


def kl_divergence(target_logits, learner_logits, tau, direction="target_first"):
    """Batch-mean KL between softened distributions.

    ``target_first`` gives KL(p_target || q_learner) with the target detached.
    ``learner_first`` gives KL(q_learner || p_target), the literal argument order.
    """
    if not tau > 0:
        raise DomainError(f"temperature must be > 0, got {tau}")
    if target_logits.shape != learner_logits.shape:
        raise ShapeError("logit shapes differ")
    log_p = log_softmax_tau(target_logits.detach(), tau)
    log_q = log_softmax_tau(learner_logits, tau)
    if direction == "target_first":
        kl = (log_p.exp() * (log_p - log_q)).sum(dim=-1)
    elif direction == "learner_first":
        kl = (log_q.exp() * (log_q - log_p)).sum(dim=-1)
    else:
        raise ValueError(f"unknown KL direction {direction!r}; choose from {KL_DIRECTIONS}")
    # rounding can push an exact zero slightly negative
    return kl.mean().clamp_min(0.0)


def response_distill(s_main, t_main, s_aux, t_aux, tau, direction="target_first"):
    return (kl_divergence(t_main, s_main, tau, direction)
            + kl_divergence(t_aux, s_aux, tau, direction))


def self_distill(s_main, s_aux, tau_prime, direction="target_first"):
    """KL from the (detached) aux head's softened output to the main head's."""
    return kl_divergence(s_aux, s_main, tau_prime, direction)


def student_total(student, teacher, labels, weights: LossWeights,
                  feature_metric="euclidean", direction="target_first") -> LossBreakdown:
    """Weighted four-term student objective. Teacher tensors are detached here."""
    hard = hard_loss(student, labels)
    feat = feature_distill(student.f_main, teacher.f_main.detach(),
                           student.f_aux, teacher.f_aux.detach(), feature_metric)
    resp = response_distill(student.main_logits, teacher.main_logits.detach(),
                            student.aux_logits, teacher.aux_logits.detach(),
                            weights.tau, direction)
    sd = self_distill(student.main_logits, student.aux_logits, weights.tau_prime, direction)
    total = combine(weights, hard, feat, resp, sd)
    return LossBreakdown(hard, feat, resp, sd, total)


def combine(weights: LossWeights, hard, feature, response, self_distill_value):
    return (weights.lambda1 * hard + weights.lambda2 * feature
            + weights.lambda3 * response + weights.lambda4 * self_distill_value)
