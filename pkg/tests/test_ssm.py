import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from histf.errors import DomainError, NumericalError
from histf.numeric import grad_check
from histf.ssm import (
    ScanStats,
    SelectiveSSM,
    discretize,
    scan_combine,
    scan_parallel,
    scan_sequential,
    selective_scan,
)

f64 = torch.float64


def random_problem(batch, length, channels, state, seed=0, dtype=f64):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(batch, length, channels, generator=g, dtype=dtype)
    delta = torch.exp(torch.empty(batch, length, channels, dtype=dtype).uniform_(math.log(1e-3), math.log(1e-1), generator=g))
    A = -torch.exp(torch.randn(channels, state, generator=g, dtype=dtype))
    B = torch.randn(batch, length, state, generator=g, dtype=dtype)
    C = torch.randn(batch, length, state, generator=g, dtype=dtype)
    D = torch.randn(channels, generator=g, dtype=dtype)
    return x, delta, A, B, C, D


def test_discretize_limits_and_sign():
    A = -torch.tensor([[1.0, 2.0, 5.0]], dtype=f64)
    B = torch.ones(1, 3, dtype=f64)
    a, b = discretize(torch.full((1, 1), 1e-12, dtype=f64), A, B)
    assert torch.allclose(a, torch.ones_like(a)) and b.abs().max() < 1e-11
    a, _ = discretize(torch.full((1, 1), math.log(2), dtype=f64), -torch.ones(1, 1, dtype=f64), torch.ones(1, 1, dtype=f64))
    assert abs(a.item() - 0.5) < 1e-15
    _, delta, A, B, _, _ = random_problem(2, 5, 3, 4)
    a, _ = discretize(delta, A, B)
    assert ((a > 0) & (a < 1)).all()


@pytest.mark.parametrize("bad", [0.0, -0.1])
def test_discretize_rejects_nonpositive_delta(bad):
    with pytest.raises(DomainError):
        discretize(torch.full((1, 2), bad), -torch.ones(2, 1), torch.ones(1, 1))


def frozen_scalar(x):
    # a = 0.5, B = C = 1, delta = ln 2 / 1 with A = -1 -> abar = 0.5 but bbar = ln 2,
    # so build the pairs directly instead
    a = torch.full_like(x, 0.5)
    return scan_sequential(a, x, dim=0), scan_parallel(a, x, dim=0)


def test_hand_recurrence():
    seq, par = frozen_scalar(torch.tensor([1.0, 0.0, 0.0], dtype=f64))
    assert seq.tolist() == [1.0, 0.5, 0.25]
    assert par.tolist() == [1.0, 0.5, 0.25]


def test_memoryless_limit():
    x, _, _, B, C, D = random_problem(1, 6, 2, 3)
    delta = torch.full_like(x, 50.0)
    A = torch.full((2, 3), -1e3, dtype=f64)
    y = selective_scan(x, delta, A, B, C, D, method="sequential")
    expected = (C * B).sum(-1, keepdim=True) * delta * x + D * x
    assert torch.allclose(y, expected, atol=1e-12)


def test_length_one_parallel_equals_sequential_exactly():
    args = random_problem(2, 1, 4, 3)
    seq = selective_scan(*args, method="sequential")
    par = selective_scan(*args, method="parallel")
    assert torch.equal(seq, par)
    x, delta, A, B, C, D = args
    expected = (C * B).sum(-1, keepdim=True) * delta * x + D * x
    assert torch.allclose(seq, expected, atol=1e-14)


@pytest.mark.parametrize("algorithm", ["doubling", "work_efficient"])
@pytest.mark.parametrize("length", [2, 7, 64, 100])
def test_parallel_matches_sequential(algorithm, length):
    args = random_problem(2, length, 5, 4, seed=length)
    seq = selective_scan(*args, method="sequential")
    par = selective_scan(*args, method="parallel", algorithm=algorithm)
    assert (seq - par).abs().max() < 1e-10


def test_doubling_depth_at_1024():
    stats = ScanStats()
    args = random_problem(1, 1024, 4, 3, seed=3)
    par = selective_scan(*args, method="parallel", stats=stats)
    seq = selective_scan(*args, method="sequential")
    assert (par - seq).abs().max() < 1e-10
    assert stats.rounds <= math.ceil(math.log2(1024))


@pytest.mark.parametrize("length", [1, 2, 5, 16, 1000, 1024])
def test_work_efficient_combines_are_linear(length):
    stats = ScanStats()
    a = torch.rand(length, 2, dtype=f64)
    b = torch.randn(length, 2, dtype=f64)
    h = scan_parallel(a, b, dim=0, algorithm="work_efficient", stats=stats)
    assert torch.allclose(h, scan_sequential(a, b, dim=0), atol=1e-12)
    assert stats.combines <= 2 * length
    assert stats.rounds <= 2 * max(math.ceil(math.log2(length)), 1)


element = st.tuples(st.floats(-2, 2), st.floats(-2, 2))


@given(element, element, element)
def test_combinator_is_associative(p, q, r):
    p, q, r = [tuple(torch.tensor(v, dtype=f64) for v in e) for e in (p, q, r)]
    left = scan_combine(scan_combine(p, q), r)
    right = scan_combine(p, scan_combine(q, r))
    for u, v in zip(left, right):
        assert abs(float(u - v)) < 1e-12


def test_non_finite_state_reports_step():
    x, delta, A, B, C, D = random_problem(1, 8, 2, 2)
    x[0, 5, 1] = float("inf")
    with pytest.raises(NumericalError) as info:
        selective_scan(x, delta, A, B, C, D, method="sequential")
    assert info.value.step == 5


def lti_reference(x, delta, A, B, C, D):
    """Direct convolution with the impulse response K_k = sum_n C_n abar_n^k delta B_n."""
    length = x.shape[0]
    abar = np.exp(delta[:, None] * A)  # (E, N)
    k = np.arange(length)
    kernel = np.einsum("n,enk->ek", C, (abar[:, :, None] ** k) * (delta[:, None] * B)[:, :, None])
    y = np.zeros_like(x)
    for t in range(length):
        for s in range(t + 1):
            y[t] += kernel[:, t - s] * x[s]
    return y + D * x


def test_zeroed_selection_reduces_to_lti_convolution():
    torch.manual_seed(0)
    ssm = SelectiveSSM(4, state_size=3).double()
    with torch.no_grad():
        for proj in (ssm.proj_B, ssm.proj_C, ssm.proj_dt_in):
            proj.weight.zero_()
        ssm.proj_B.bias.copy_(torch.tensor([0.3, -1.0, 0.7]))
        ssm.proj_C.bias.copy_(torch.tensor([1.2, 0.4, -0.5]))
        ssm.A_log.add_(0.3 * torch.randn_like(ssm.A_log))
    x = torch.randn(1, 40, 4, dtype=f64)
    y = ssm(x)[0].detach().numpy()
    delta = torch.nn.functional.softplus(ssm.proj_dt.bias).detach().numpy()
    ref = lti_reference(
        x[0].numpy(), delta, ssm.A.detach().numpy(), ssm.proj_B.bias.detach().numpy(),
        ssm.proj_C.bias.detach().numpy(), ssm.D.detach().numpy(),
    )
    assert np.abs(y - ref).max() < 1e-8


def test_delta_strictly_positive_and_init_range():
    torch.manual_seed(1)
    ssm = SelectiveSSM(32, state_size=4)
    delta, _, _ = ssm.selection(torch.zeros(1, 3, 32))
    assert (delta > 0).all()
    assert delta.min() >= 1e-3 * 0.999 and delta.max() <= 1e-1 * 1.001
    assert (ssm.A < 0).all()


@pytest.mark.parametrize("method", ["sequential", "parallel"])
def test_scan_gradients(method):
    x, delta, A, B, C, D = random_problem(1, 6, 2, 3, seed=4)
    w = torch.randn(1, 6, 2, dtype=f64)
    report = grad_check(
        lambda x, d, A, B, C: (selective_scan(x, d, A, B, C, D, method=method) * w).sum(),
        [x, delta, A, B, C],
    )
    assert report.max_rel_error < 1e-5, report


def test_custom_scan_backward_matches_autograd_of_sequential():
    a = torch.rand(2, 33, 3, dtype=f64, requires_grad=True)
    b = torch.randn(2, 33, 3, dtype=f64, requires_grad=True)
    w = torch.randn(2, 33, 3, dtype=f64)
    ga = torch.autograd.grad((scan_parallel(a, b) * w).sum(), [a, b])
    gs = torch.autograd.grad((scan_sequential(a, b) * w).sum(), [a, b])
    for p, s in zip(ga, gs):
        assert (p - s).abs().max() < 1e-12


def test_module_parallel_matches_sequential_float32():
    torch.manual_seed(2)
    ssm = SelectiveSSM(16, state_size=8)
    x = torch.randn(3, 50, 16)
    assert (ssm(x, method="parallel") - ssm(x, method="sequential")).abs().max() < 1e-5
