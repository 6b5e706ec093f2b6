"""Dense tensor primitives, a finite-difference gradient checker and the
binary tensor format.

Tensors are plain ``torch.Tensor`` values; reverse-mode differentiation is
torch autograd (one graph per training step plays the role of the tape).
The wrappers here add the shape checks and conventions the rest of the
package relies on.
"""
from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import NumericalError, ShapeError

TENSOR_MAGIC = b"HSTF"
TENSOR_VERSION = 1

_DTYPE_TAGS = {torch.float32: 0, torch.float64: 1, torch.int64: 2, torch.int32: 3}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}
_NP_DTYPES = {0: "<f4", 1: "<f8", 2: "<i8", 3: "<i4"}


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ShapeError(
            f"matmul inner extents differ: {tuple(a.shape)} @ {tuple(b.shape)}"
        )
    return a @ b


def softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    if not -x.dim() <= axis < max(x.dim(), 1):
        raise ShapeError(f"axis {axis} invalid for shape {tuple(x.shape)}")
    shifted = x - x.amax(dim=axis, keepdim=True).detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=axis, keepdim=True)


def layer_norm(
    x: torch.Tensor,
    gain: torch.Tensor | None = None,
    bias: torch.Tensor | None = None,
    eps: float = 1e-5,
) -> torch.Tensor:
    d = x.shape[-1]
    for name, p in (("gain", gain), ("bias", bias)):
        if p is not None and tuple(p.shape) != (d,):
            raise ShapeError(f"layer_norm {name} has shape {tuple(p.shape)}, expected ({d},)")
    mean = x.mean(dim=-1, keepdim=True)
    var = ((x - mean) ** 2).mean(dim=-1, keepdim=True)
    y = (x - mean) / torch.sqrt(var + eps)
    if gain is not None:
        y = y * gain
    if bias is not None:
        y = y + bias
    return y


def silu(x: torch.Tensor) -> torch.Tensor:
    return x * torch.sigmoid(x)


def _padding(length: int, width: int, stride: int, padding) -> tuple[int, int]:
    if isinstance(padding, int):
        return padding, padding
    if padding == "valid":
        return 0, 0
    if padding == "causal":
        return width - 1, 0
    if padding == "same":
        out = -(-length // stride)
        total = max((out - 1) * stride + width - length, 0)
        # asymmetric padding puts the extra zero on the left
        return total - total // 2, total // 2
    raise ValueError(f"unknown padding {padding!r}")


def conv1d(
    x: torch.Tensor,
    kernel: torch.Tensor,
    stride: int = 1,
    padding: int | str = "same",
    bias: torch.Tensor | None = None,
    groups: int = 1,
) -> torch.Tensor:
    """Cross-correlation along the time axis of a channels-last tensor.

    ``x`` is ``(T,)``, ``(T, C)`` or ``(B, T, C)``. A 1-D ``kernel`` is applied
    to every channel independently; otherwise ``kernel`` has the torch layout
    ``(C_out, C_in // groups, K)``.
    """
    squeeze_batch = x.dim() < 3
    squeeze_chan = x.dim() == 1
    if squeeze_chan:
        x = x[:, None]
    if squeeze_batch:
        x = x[None]
    _, length, channels = x.shape
    if kernel.dim() == 1:
        kernel = kernel.reshape(1, 1, -1).expand(channels, 1, -1)
        groups = channels
    width = kernel.shape[-1]
    left, right = _padding(length, width, stride, padding)
    if width > length + left + right:
        raise ShapeError(
            f"kernel width {width} exceeds padded length {length + left + right}"
        )
    if kernel.shape[1] * groups != channels:
        raise ShapeError(
            f"kernel {tuple(kernel.shape)} with groups={groups} does not fit {channels} channels"
        )
    h = F.pad(x.transpose(1, 2), (left, right))
    y = F.conv1d(h, kernel, bias=bias, stride=stride, groups=groups).transpose(1, 2)
    if squeeze_batch:
        y = y[0]
    if squeeze_chan and y.shape[-1] == 1:
        y = y[:, 0]
    return y


# ----------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    tol: float
    checked: int
    worst: tuple[int, int] | None = None  # (tensor index, flat entry)
    diagnostics: list[str] = field(default_factory=list)

    def __bool__(self) -> bool:
        return self.passed


def grad_check(
    f: Callable[..., torch.Tensor],
    x: torch.Tensor | Sequence[torch.Tensor],
    tol: float = 1e-6,
    step: float = 1e-5,
    floor: float = 1e-6,
    max_entries: int | None = None,
    seed: int = 0,
    grad_fn: Callable[..., Sequence[torch.Tensor]] | None = None,
) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``f`` with central differences.

    ``x`` is one tensor or a list of tensors; ``f`` is called with them as
    positional arguments. The relative error of an entry is
    ``|g - n| / max(|g|, |n|, floor)``, so gradients below ``floor`` are
    compared absolutely. With ``max_entries`` set, that many entries per
    tensor are drawn at random (seeded) instead of checking every entry.
    ``grad_fn`` overrides the analytic side, which the tests use as a
    negative control.
    """
    single = isinstance(x, torch.Tensor)
    xs = [x] if single else list(x)
    leaves = [t.detach().clone().requires_grad_(True) for t in xs]

    if grad_fn is None:
        out = f(*leaves)
        if out.numel() != 1:
            raise ShapeError(f"grad_check needs a scalar function, got shape {tuple(out.shape)}")
        grads = torch.autograd.grad(out, leaves, allow_unused=True)
        grads = [torch.zeros_like(l) if g is None else g for g, l in zip(grads, leaves)]
    else:
        grads = list(grad_fn(*leaves))

    report = GradCheckReport(passed=True, max_rel_error=0.0, tol=tol, checked=0)
    gen = np.random.default_rng(seed)
    with torch.no_grad():
        base = [l.detach().clone() for l in leaves]
        for ti, (b, g) in enumerate(zip(base, grads)):
            if not torch.isfinite(g).all():
                report.passed = False
                report.diagnostics.append(f"tensor {ti}: non-finite analytic gradient")
                continue
            n = b.numel()
            entries = range(n)
            if max_entries is not None and n > max_entries:
                entries = gen.choice(n, size=max_entries, replace=False)
            flat = b.view(-1)
            gflat = g.reshape(-1)
            for e in entries:
                e = int(e)
                orig = flat[e].item()
                flat[e] = orig + step
                fp = float(f(*base))
                flat[e] = orig - step
                fm = float(f(*base))
                flat[e] = orig
                num = (fp - fm) / (2 * step)
                ana = float(gflat[e])
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    report.passed = False
                    report.diagnostics.append(f"tensor {ti} entry {e}: non-finite function value")
                    continue
                rel = abs(ana - num) / max(abs(ana), abs(num), floor)
                report.checked += 1
                if rel > report.max_rel_error:
                    report.max_rel_error = rel
                    report.worst = (ti, e)
    if report.max_rel_error >= tol:
        report.passed = False
    return report


# ----------------------------------------------------------------------------
# serialization


def write_tensor(fh: BinaryIO, t: torch.Tensor) -> None:
    t = t.detach().cpu().contiguous()
    if t.dtype not in _DTYPE_TAGS:
        raise ShapeError(f"unsupported dtype {t.dtype}")
    tag = _DTYPE_TAGS[t.dtype]
    fh.write(TENSOR_MAGIC)
    fh.write(struct.pack("<HBB", TENSOR_VERSION, tag, t.dim()))
    for extent in t.shape:
        fh.write(struct.pack("<Q", extent))
    fh.write(t.numpy().astype(_NP_DTYPES[tag], copy=False).tobytes())


def read_tensor(fh: BinaryIO) -> torch.Tensor:
    magic = fh.read(4)
    if magic != TENSOR_MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}")
    version, tag, rank = struct.unpack("<HBB", fh.read(4))
    if version != TENSOR_VERSION:
        raise ValueError(f"unsupported tensor version {version}")
    if tag not in _TAG_DTYPES:
        raise ValueError(f"unknown dtype tag {tag}")
    shape = struct.unpack(f"<{rank}Q", fh.read(8 * rank))
    dt = np.dtype(_NP_DTYPES[tag])
    count = int(np.prod(shape)) if rank else 1
    payload = fh.read(count * dt.itemsize)
    if len(payload) != count * dt.itemsize:
        raise ValueError("truncated tensor payload")
    arr = np.frombuffer(payload, dtype=dt).reshape(shape)
    return torch.from_numpy(arr.astype(dt.newbyteorder("="), copy=True))


def tensor_to_bytes(t: torch.Tensor) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, t)
    return buf.getvalue()


def tensor_from_bytes(data: bytes) -> torch.Tensor:
    return read_tensor(io.BytesIO(data))
