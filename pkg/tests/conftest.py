import numpy as np
import pytest
import torch

from hybridkd import nn_core as core
from hybridkd.student_net import StageConfig, build_student
from hybridkd.teacher_net import TeacherConfig, build_teacher


class KinkWatcher:
    """Records which side of every ReLU/ReLU6 kink each pre-activation lies on.

    A central difference straddling a kink measures a chord, not the
    derivative, so such coordinates are re-drawn by the checker.
    """

    def __init__(self, module):
        self.masks = []
        self.handles = [m.register_forward_hook(self._hook) for m in module.modules()
                        if isinstance(m, (torch.nn.ReLU, torch.nn.ReLU6))]

    def _hook(self, module, inputs, output):
        x = inputs[0].detach()
        self.masks.append(((x > 0).to(torch.uint8) + (x > 6).to(torch.uint8)).flatten())

    def pattern(self):
        return torch.cat(self.masks) if self.masks else torch.zeros(0)

    def reset(self):
        self.masks = []


def finite_difference_check(loss_fn, tensors, n_coords=100, step=1e-3, rtol=1e-3, seed=0,
                            floor=1e-6, watch=None):
    """Compare autograd against central differences on sampled coordinates.

    ``loss_fn()`` must recompute the scalar loss from ``tensors`` (leaf tensors
    with ``requires_grad``). Returns the list of (analytic, numeric) pairs and
    the worst relative error, where the error of a pair is
    ``|a - n| / max(|a|, |n|, floor)``. With ``watch`` (a module), coordinates
    whose +/- step evaluations land on different sides of an activation kink
    are replaced by fresh draws.
    """
    watcher = KinkWatcher(watch) if watch is not None else None
    for t in tensors:
        t.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    grads = [torch.zeros_like(t) if g is None else g for t, g in zip(tensors, grads)]
    sizes = np.array([t.numel() for t in tensors])
    rng = np.random.default_rng(seed)
    total = int(sizes.sum())
    picks = list(rng.permutation(total))
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    pairs, worst = [], 0.0
    with torch.no_grad():
        while picks and len(pairs) < n_coords:
            flat = picks.pop(0)
            i = int(np.searchsorted(offsets, flat, side="right") - 1)
            j = int(flat - offsets[i])
            view = tensors[i].view(-1)
            orig = view[j].item()
            if watcher:
                watcher.reset()
            view[j] = orig + step
            up = float(loss_fn())
            if watcher:
                up_pattern = watcher.pattern()
                watcher.reset()
            view[j] = orig - step
            down = float(loss_fn())
            view[j] = orig
            if watcher and not torch.equal(up_pattern, watcher.pattern()):
                continue
            numeric = (up - down) / (2 * step)
            analytic = float(grads[i].reshape(-1)[j])
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
            worst = max(worst, err)
            pairs.append((analytic, numeric))
    if watcher:
        for h in watcher.handles:
            h.remove()
    return pairs, worst


@pytest.fixture
def fd_check():
    return finite_difference_check


TINY_STUDENT = StageConfig(num_blocks=(1, 1, 1, 1))


@pytest.fixture
def tiny_student():
    return build_student(3, TINY_STUDENT, generator=torch.Generator().manual_seed(0))


@pytest.fixture
def tiny_teacher():
    cfg = TeacherConfig(widths=(8, 16, 32, 64), blocks=(1, 1, 1, 1))
    return build_teacher(3, cfg, generator=torch.Generator().manual_seed(1))


def make_tiny_pair(num_classes=3, seed=0):
    """Small teacher/student whose feature widths line up (128 main, 112 aux)."""
    g = torch.Generator().manual_seed(seed)
    teacher = build_teacher(num_classes, TeacherConfig(widths=(8, 16, 32, 128), blocks=(1, 1, 1, 1),
                                                       aux_out_channels=112), generator=g)
    student = build_student(num_classes, TINY_STUDENT, generator=g)
    return teacher, student


@pytest.fixture
def tiny_pair():
    return make_tiny_pair()


LAYER_CASES = ["conv2d", "depthwise_conv2d", "batch_norm", "relu6", "relu", "max_pool",
               "avg_pool", "global_avg_pool", "linear", "concat_channels", "add"]


def layer_case(kind):
    """Float64 inputs for one layer kind: ``(forward_fn, leaf_tensors, projection)``.

    The scalar ``(forward_fn() * projection).sum()`` exercises every output
    coordinate's gradient path.
    """
    g = torch.Generator().manual_seed(7)
    dt = torch.float64

    def rnd(*shape, scale=1.0):
        return (torch.randn(*shape, generator=g, dtype=dt) * scale).requires_grad_()

    x = rnd(2, 3, 6, 6)
    tensors = [x]
    if kind == "conv2d":
        w, b = rnd(4, 3, 3, 3), rnd(4)
        fwd = lambda: core.conv2d_forward(x, w, b, stride=2, padding=1)
        tensors += [w, b]
    elif kind == "depthwise_conv2d":
        w = rnd(3, 1, 3, 3)
        fwd = lambda: core.depthwise_conv2d_forward(x, w, stride=1, padding=1)
        tensors += [w]
    elif kind == "batch_norm":
        gamma, beta = rnd(3), rnd(3)
        fwd = lambda: core.batch_norm_forward(x, gamma, beta, None, None, True)
        tensors += [gamma, beta]
    elif kind in ("relu6", "relu"):
        with torch.no_grad():
            # keep inputs away from the kinks at 0 and 6
            x.copy_(torch.sign(x) * (x.abs() * 3 + 0.05))
            x[(x - 6).abs() < 0.05] = 5.5
        mod = core.ReLU6() if kind == "relu6" else core.ReLU()
        fwd = lambda: mod(x)
    elif kind == "max_pool":
        fwd = lambda: core.pool_forward(x, "max", 2, 2)
    elif kind == "avg_pool":
        fwd = lambda: core.pool_forward(x, "avg", 2, 2)
    elif kind == "global_avg_pool":
        fwd = lambda: core.pool_forward(x, "global_avg")
    elif kind == "linear":
        x = rnd(4, 5)
        w, b = rnd(3, 5), rnd(3)
        tensors = [x, w, b]
        fwd = lambda: core.linear_forward(x, w, b)
    elif kind == "concat_channels":
        y = rnd(2, 2, 6, 6)
        tensors += [y]
        fwd = lambda: core.concat_channels(x, y)
    else:
        y = rnd(2, 3, 6, 6)
        tensors += [y]
        fwd = lambda: core.add(x, y)
    proj = torch.randn(fwd().shape, generator=g, dtype=dt)
    return fwd, tensors, proj




def frozen_mentor_total(student_fn, teacher, labels, weights, metric="euclidean", direction="target_first"):
    """Student objective with the self-distillation mentor held at its current value.

    ``student_total`` detaches the aux logits inside the self-distillation
    term, so its autograd gradient is the gradient of this function, where the
    mentor is a constant. Perturbing the aux logits in a finite-difference
    probe would otherwise also move the mentor. Returns a zero-argument loss
    closure for ``finite_difference_check``.
    """
    from hybridkd.distill_objectives import (
        combine, feature_distill, hard_loss, response_distill, self_distill,
    )

    with torch.no_grad():
        mentor = student_fn().aux_logits.detach().clone()

    def loss():
        s = student_fn()
        return combine(
            weights, hard_loss(s, labels),
            feature_distill(s.f_main, teacher.f_main, s.f_aux, teacher.f_aux, metric),
            response_distill(s.main_logits, teacher.main_logits, s.aux_logits, teacher.aux_logits,
                             weights.tau, direction),
            self_distill(s.main_logits, mentor, weights.tau_prime, direction),
        )
    return loss
