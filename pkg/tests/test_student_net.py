import pytest
import torch

from hybridkd.distill_objectives import LossWeights, student_total
from hybridkd.model_analysis import count_params
from hybridkd.nn_core import ConfigurationError, ShapeError
from hybridkd.student_net import (
    AlignmentBranch, HybridBlock, HybridBlockConfig, StageConfig, build_student,
)


def block_params(cin, k=16, t=3):
    """Closed-form trainable count of one hybrid block (conv weights + BN affine)."""
    bw, ew = 4 * k, t * 4 * k
    convs = cin * bw + bw * ew + ew * 9 + ew * k + bw * k
    bns = 2 * (bw + ew + ew + k + k)
    return convs + bns


def stage_params(cin, n, k=16):
    return sum(block_params(cin + j * k) for j in range(n))


@pytest.fixture(scope="module")
def student():
    return build_student(2, generator=torch.Generator().manual_seed(0))


def test_config_defaults():
    cfg = StageConfig()
    assert cfg.block.growth_rate == 16 and cfg.block.expansion == 3
    assert cfg.block.bottleneck_width == 64
    assert cfg.stage_out_channels() == [128, 224, 352, 512]


def test_invalid_configs():
    with pytest.raises(ConfigurationError):
        HybridBlockConfig(growth_rate=0)
    with pytest.raises(ConfigurationError):
        StageConfig(num_blocks=(4, 0, 8, 10))
    with pytest.raises(ConfigurationError):
        build_student(1)


def test_parameter_audit_against_closed_form(student):
    rep = count_params(student)
    assert rep.stage_totals["stem"] == 7 * 7 * 3 * 64 + 128 == 9536
    cins = [64, 128, 224, 352]
    for s, (cin, n) in enumerate(zip(cins, (4, 6, 8, 10)), start=1):
        assert rep.stage_totals[f"stage{s}"] == stage_params(cin, n)
    table = {"stem": 0.01, "stage1": 0.1, "stage2": 0.18, "stage3": 0.3, "stage4": 0.47}
    for name, millions in table.items():
        assert abs(rep.stage_totals[name] / 1e6 - millions) <= 0.02
    assert 1.03e6 <= rep.backbone_total <= 1.09e6
    assert rep.head_total == 1026


def test_stage_shapes(student):
    trace = []
    student.eval()
    with torch.no_grad():
        student.features(torch.zeros(1, 3, 224, 224), trace)
    assert trace == [(128, 56, 56), (224, 28, 28), (352, 14, 14), (512, 7, 7)]


def test_block_channels_and_prefix():
    torch.manual_seed(0)
    block = HybridBlock(64).eval()
    x = torch.randn(1, 64, 56, 56)
    with torch.no_grad():
        y = block(x)
    assert y.shape == (1, 80, 56, 56)
    assert torch.equal(y[:, :64], x)


def test_block_additive_decomposition():
    torch.manual_seed(0)
    block = HybridBlock(32).eval()
    with torch.no_grad():
        for mod in (block.expand, block.depthwise, block.project):
            for p in mod.parameters():
                p.zero_()
        x = torch.randn(2, 32, 8, 8)
        x_bot = block.bottleneck(x)
        assert torch.equal(block.residual(x), block.shortcut(x_bot))


def test_block_channel_mismatch():
    with pytest.raises(ShapeError):
        HybridBlock(32)(torch.zeros(1, 31, 4, 4))


def test_channel_recurrence_and_prefix_everywhere(student):
    k = 16
    seen = []

    def hook(block, inputs, output):
        x = inputs[0]
        seen.append((block.in_channels, output.shape[1], torch.equal(output[:, : x.shape[1]], x)))

    hs = [m.register_forward_hook(hook) for m in student.modules() if isinstance(m, HybridBlock)]
    student.eval()
    with torch.no_grad():
        student(torch.randn(1, 3, 64, 64))
    for h in hs:
        h.remove()
    assert len(seen) == 28
    assert all(out == cin + k and same for cin, out, same in seen)


def test_forward_bundle(student):
    student.eval()
    x = torch.randn(2, 3, 224, 224)
    with torch.no_grad():
        b = student(x)
        b2 = student(x)
    assert b.main_logits.shape == (2, 2) and b.aux_logits.shape == (2, 2)
    assert b.f_main.shape == (2, 512) and b.f_aux.shape == (2, 352)
    assert b.tap.shape == (2, 352, 7, 7)
    for t1, t2 in zip(b, b2):
        assert torch.equal(t1, t2)
    assert all(torch.isfinite(t).all() for t in b)


def test_wrong_input_channels(student):
    with pytest.raises(ShapeError):
        student(torch.zeros(1, 1, 64, 64))


def test_student_aux_branch_stride_one():
    branch = AlignmentBranch(352, 352, stride=1)
    assert branch(torch.randn(2, 352, 7, 7)).shape == (2, 352, 7, 7)


def test_no_dead_parameters(tiny_student, tiny_teacher):
    torch.manual_seed(0)
    x = torch.randn(4, 3, 64, 64)
    y = torch.tensor([0, 1, 2, 0])
    with torch.no_grad():
        t = tiny_teacher.eval()(x)
    tiny_student.train()
    s = tiny_student(x)
    # teacher features of the tiny teacher are 64-d; pad to the student's widths
    t = t._replace(f_main=torch.randn(4, s.f_main.shape[1]), f_aux=torch.randn(4, s.f_aux.shape[1]))
    student_total(s, t, y, LossWeights()).total.backward()
    dead = [n for n, p in tiny_student.named_parameters() if p.grad is None or not p.grad.abs().sum() > 0]
    assert dead == []
