import io

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from histf.errors import ShapeError
from histf.numeric import (
    conv1d,
    grad_check,
    layer_norm,
    matmul,
    read_tensor,
    silu,
    softmax,
    tensor_from_bytes,
    tensor_to_bytes,
    write_tensor,
)

f64 = torch.float64


def rand(*shape, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=g, dtype=f64)


def test_matmul_identity_and_hand_case():
    m = rand(3, 3)
    assert torch.equal(matmul(torch.eye(3, dtype=f64), m), m)
    a = torch.tensor([[1.0, 2.0], [3.0, 4.0]])
    b = torch.tensor([[0.0], [1.0]])
    assert matmul(a, b).tolist() == [[2.0], [4.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        matmul(torch.zeros(2, 3), torch.zeros(4, 5))


def test_matmul_gradients_match_finite_differences():
    report = grad_check(lambda a, b: (matmul(a, b) ** 2).sum(), [rand(5, 7, seed=1), rand(7, 3, seed=2)])
    assert report.passed, report
    assert report.max_rel_error < 1e-6


@pytest.mark.parametrize("x, expected", [([0.0, 0.0], [0.5, 0.5]), ([1000.0, 1000.0], [0.5, 0.5])])
def test_softmax_symmetric_cases(x, expected):
    out = softmax(torch.tensor(x, dtype=f64))
    assert out.tolist() == expected


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=40))
def test_softmax_sums_to_one(values):
    out = softmax(torch.tensor(values, dtype=f64))
    assert (out >= 0).all()
    assert abs(out.sum().item() - 1.0) < 1e-9


def test_softmax_axis_checked():
    with pytest.raises(ShapeError):
        softmax(torch.zeros(2, 3), axis=2)


def test_layer_norm_constant_row_is_zero():
    out = layer_norm(torch.full((2, 6), 3.5, dtype=f64), torch.ones(6, dtype=f64), torch.zeros(6, dtype=f64))
    assert torch.equal(out, torch.zeros(2, 6, dtype=f64))


def test_layer_norm_row_stats_and_gradient():
    x = rand(4, 9)
    y = layer_norm(x)
    assert y.mean(-1).abs().max() < 1e-7
    gain, bias = rand(9, seed=3), rand(9, seed=4)
    w = rand(4, 9, seed=5)
    report = grad_check(lambda x, g, b: (layer_norm(x, g, b) * w).sum(), [x, gain, bias])
    assert report.max_rel_error < 1e-6, report


def test_layer_norm_checks_affine_shape():
    with pytest.raises(ShapeError):
        layer_norm(torch.zeros(2, 4), torch.ones(3))


def test_silu_values_and_derivative():
    assert silu(torch.tensor(0.0, dtype=f64)).item() == 0.0
    assert abs(silu(torch.tensor(20.0, dtype=f64)).item() - 20.0) < 1e-6
    x = torch.tensor(0.0, dtype=f64, requires_grad=True)
    silu(x).backward()
    assert abs(x.grad.item() - 0.5) < 1e-9


def test_conv1d_delta_kernel_is_identity():
    x = rand(10, 3)
    assert torch.equal(conv1d(x, torch.tensor([1.0], dtype=f64)), x)


def test_conv1d_same_padding_is_left_biased():
    out = conv1d(torch.tensor([1.0, 2.0, 3.0], dtype=f64), torch.tensor([1.0, 1.0], dtype=f64), padding="same")
    assert out.tolist() == [1.0, 3.0, 5.0]


def direct_conv(x, k, stride, left, right):
    """Literal sum over the zero-padded sequence."""
    padded = np.concatenate([np.zeros(left), x, np.zeros(right)])
    width = len(k)
    return np.array([
        sum(padded[i + j] * k[j] for j in range(width))
        for i in range(0, len(padded) - width + 1, stride)
    ])


@pytest.mark.parametrize("padding, pads", [("valid", lambda w: (0, 0)), ("causal", lambda w: (w - 1, 0)), (2, lambda w: (2, 2))])
def test_conv1d_matches_direct_summation(padding, pads):
    rng = np.random.default_rng(0)
    x, k = rng.standard_normal(12), rng.standard_normal(4)
    left, right = pads(4)
    out = conv1d(torch.tensor(x), torch.tensor(k), stride=2, padding=padding).numpy()
    np.testing.assert_allclose(out, direct_conv(x, k, 2, left, right), atol=1e-12)


def test_conv1d_kernel_wider_than_input():
    with pytest.raises(ShapeError):
        conv1d(torch.zeros(3), torch.ones(5), padding="valid")


def test_conv1d_gradient():
    x, k, b = rand(2, 8, 4), rand(6, 2, 3, seed=1), rand(6, seed=2)
    report = grad_check(lambda x, k, b: conv1d(x, k, padding="same", bias=b, groups=2).pow(2).sum(), [x, k, b])
    assert report.max_rel_error < 1e-6, report


shape_cases = st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6))


@settings(max_examples=1000)
@given(shape_cases, st.integers(1, 20), st.integers(1, 5), st.integers(1, 4))
def test_shape_laws(mkn, length, width, stride):
    m, k, n = mkn
    assert matmul(torch.zeros(m, k), torch.zeros(k, n)).shape == (m, n)
    x = torch.zeros(length, 2)
    kern = torch.ones(width)
    assert conv1d(x, kern, stride=stride, padding="same").shape == (-(-length // stride), 2)
    assert conv1d(x, kern, padding="causal").shape == (length, 2)
    if width <= length:
        assert conv1d(x, kern, stride=stride, padding="valid").shape == ((length - width) // stride + 1, 2)
    else:
        with pytest.raises(ShapeError):
            conv1d(x, kern, stride=stride, padding="valid")


def test_grad_check_sum_is_exact():
    # central differences of a linear map only carry round-off
    report = grad_check(lambda x: x.sum(), rand(3, 4))
    assert report.passed and report.max_rel_error < 1e-9
    assert report.checked == 12


def test_grad_check_linear_silu():
    w, x = rand(5, 3), rand(4, 5, seed=1)
    report = grad_check(lambda w, x: silu(matmul(x, w)).sum(), [w, x])
    assert report.max_rel_error < 1e-6, report


def test_grad_check_rejects_wrong_gradient():
    x = rand(6)
    report = grad_check(lambda x: (x ** 3).sum(), x, grad_fn=lambda x: [2 * x])
    assert not report.passed
    assert report.max_rel_error > 1e-2


def test_grad_check_flags_non_finite():
    report = grad_check(lambda x: torch.log(x).sum(), torch.tensor([1e-7, 1.0], dtype=f64))
    assert not report.passed
    assert report.diagnostics


@pytest.mark.parametrize("dtype", [torch.float32, torch.float64, torch.int64, torch.int32])
def test_tensor_roundtrip(dtype):
    t = (rand(2, 3, 4) * 100).to(dtype)
    back = tensor_from_bytes(tensor_to_bytes(t))
    assert back.dtype == dtype and torch.equal(back, t)


def test_tensor_header_layout():
    data = tensor_to_bytes(torch.arange(6, dtype=torch.float64).reshape(2, 3))
    assert data[:4] == b"HSTF"
    assert data[4:6] == (1).to_bytes(2, "little")
    assert data[6] == 1 and data[7] == 2
    assert data[8:16] == (2).to_bytes(8, "little") and data[16:24] == (3).to_bytes(8, "little")
    assert np.frombuffer(data[24:], "<f8").tolist() == [0, 1, 2, 3, 4, 5]


def test_tensor_stream_roundtrip_and_bad_magic():
    buf = io.BytesIO()
    write_tensor(buf, torch.ones(2))
    write_tensor(buf, torch.zeros(3, dtype=torch.int64))
    buf.seek(0)
    assert read_tensor(buf).tolist() == [1.0, 1.0]
    assert read_tensor(buf).tolist() == [0, 0, 0]
    with pytest.raises(ValueError):
        tensor_from_bytes(b"NOPE" + bytes(8))
