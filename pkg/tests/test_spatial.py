import pytest
import torch
import torch.nn.functional as F

from histf.partition import default_tables, parts2whole, whole2parts
from histf.spatial import DualSpatialBlock, PartBranch, WholeBranch
from histf.ssm import inverse_softplus

from gradutil import module_grad_check

f64 = torch.float64
TOY = default_tables("toy")


def make_block(seed=0, d_model=8):
    torch.manual_seed(seed)
    return DualSpatialBlock(d_model, TOY, part_width=4, expand=2, state_size=3).double()


def zero_(module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()


def test_shape_law():
    torch.manual_seed(0)
    block = DualSpatialBlock(32, default_tables("humanml3d_22"), part_width=8, state_size=4)
    assert block(torch.randn(2, 17, 32)).shape == (2, 17, 32)


def test_six_kernels_one_per_part():
    block = make_block()
    assert block.part_branch.part_kernels.shape[0] == 6
    assert block.part_branch.names == TOY.names


@pytest.mark.parametrize("zeroed", ["part_branch", "whole_branch"])
def test_branch_ablation(zeroed):
    block = make_block(1)
    zero_(getattr(block, zeroed))
    other = "whole_branch" if zeroed == "part_branch" else "part_branch"
    x = torch.randn(2, 6, 8, dtype=f64)
    expected = x + getattr(block, other)(block.norm(x))
    assert torch.equal(block(x), expected)


def test_additivity():
    block = make_block(2)
    x = torch.randn(2, 6, 8, dtype=f64)
    h = block.norm(x)
    assert torch.allclose(block(x), x + block.whole_branch(h) + block.part_branch(h), atol=1e-14)


def identity_ssm_(ssm):
    """A_bar = 0 and C . B_bar = 1 per channel, no skip: the scan returns its input."""
    with torch.no_grad():
        for proj in (ssm.proj_B, ssm.proj_C, ssm.proj_dt_in):
            proj.weight.zero_()
        e0 = torch.zeros(ssm.state_size, dtype=ssm.A_log.dtype)
        e0[0] = 1.0
        ssm.proj_B.bias.copy_(e0)
        ssm.proj_C.bias.copy_(e0)
        ssm.proj_dt.bias.copy_(inverse_softplus(torch.ones(ssm.channels, dtype=f64)))
        ssm.A_log.fill_(10.0)  # exp(-e^10) underflows to 0
        ssm.D.zero_()


def test_part_branch_with_identity_conv_and_ssm_is_a_projection_round_trip():
    torch.manual_seed(3)
    branch = PartBranch(8, TOY, part_width=4, state_size=2).double()
    with torch.no_grad():
        branch.part_kernels.zero_()
        branch.part_kernels[:, 0, 1, 1] = 1.0
        branch.part_kernel_bias.zero_()
    identity_ssm_(branch.ssm)
    h = torch.randn(2, 5, 8, dtype=f64)
    parts = whole2parts(branch.unproject(h), TOY)
    out = {n: branch.part_out[n](F.silu(branch.part_in[n](parts[n]))) for n in TOY.names}
    expected = branch.project(parts2whole(out, TOY))
    assert (branch(h) - expected).abs().max() < 1e-12


def test_pre_ssm_locality():
    torch.manual_seed(4)
    branch = PartBranch(TOY.width, TOY, part_width=4, state_size=2).double()
    with torch.no_grad():
        branch.unproject.weight.copy_(torch.eye(TOY.width, dtype=f64))
        branch.unproject.bias.zero_()
    h = torch.randn(1, 6, TOY.width, dtype=f64)
    base = branch.local_features(h)
    for name in TOY.names:
        edited = h.clone()
        edited[..., list(TOY[name])] += 1.0
        after = branch.local_features(edited)
        for other in TOY.names:
            changed = not torch.equal(after[other], base[other])
            assert changed == (other == name), (name, other)


def test_whole_branch_zero_in_zero_out():
    torch.manual_seed(5)
    branch = WholeBranch(8, state_size=3).double()
    x = torch.zeros(2, 7, 8, dtype=f64)
    assert torch.equal(branch(x), torch.zeros_like(x))


def test_whole_branch_gradients():
    torch.manual_seed(6)
    branch = WholeBranch(4, expand=2, state_size=2)
    x = torch.randn(1, 5, 4, dtype=f64)
    w = torch.randn(1, 5, 4, dtype=f64)
    report, worst = module_grad_check(branch, lambda y: (y * w).sum(), (x,), tol=1e-5)
    assert report.passed, (report.max_rel_error, worst)


def test_block_gradients():
    block = make_block(7)
    x = torch.randn(1, 5, 8, dtype=f64)
    w = torch.randn(1, 5, 8, dtype=f64)
    report, worst = module_grad_check(block, lambda y: (y * w).sum(), (x,), tol=1e-5, max_entries=10)
    assert report.passed, (report.max_rel_error, worst)
