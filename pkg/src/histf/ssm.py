"""Diagonal selective state-space scans.

The recurrence ``h_t = a_t * h_{t-1} + b_t`` (elementwise, ``h_0 = 0``) is
evaluated either literally, step by step, or as an associative prefix scan
over the pairs ``(a_t, b_t)`` with the combinator

    (a1, b1) then (a2, b2)  ->  (a2 * a1, a2 * b1 + b2)

Two parallel schedules are provided: ``"doubling"`` (Hillis-Steele,
``ceil(log2 T)`` rounds, the default) and ``"work_efficient"`` (odd/even
reduction, ``O(T)`` combines in ``2 * ceil(log2 T)`` rounds).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DomainError, NumericalError


@dataclass
class ScanStats:
    rounds: int = 0
    combines: int = 0


def scan_combine(first, second):
    """Compose two affine maps ``h -> a*h + b``; ``first`` is applied first."""
    a1, b1 = first
    a2, b2 = second
    return a2 * a1, a2 * b1 + b2


def scan_sequential(a: torch.Tensor, b: torch.Tensor, dim: int = 1) -> torch.Tensor:
    a = a.movedim(dim, 0)
    b = b.movedim(dim, 0)
    h = torch.zeros_like(b[0])
    states = []
    for t in range(a.shape[0]):
        h = a[t] * h + b[t]
        states.append(h)
    return torch.stack(states).movedim(0, dim)


def _scan_doubling(a, b, stats):
    """Hillis-Steele rounds on private copies; no autograd graph."""
    a = a.clone()
    b = b.clone()
    length = a.shape[0]
    shift = 1
    while shift < length:
        b[shift:] = a[shift:] * b[:-shift] + b[shift:]
        a[shift:] = a[shift:] * a[:-shift]
        stats.rounds += 1
        stats.combines += length - shift
        shift *= 2
    return b


class _DoublingScan(torch.autograd.Function):
    """Doubling scan whose backward pass is the reverse-time scan of the adjoint.

    For ``h_t = a_t h_{t-1} + b_t`` the cotangent ``lam_t = g_t + a_{t+1} lam_{t+1}``
    is itself an affine recurrence run backwards in time; then
    ``db_t = lam_t`` and ``da_t = lam_t * h_{t-1}``.
    """

    @staticmethod
    def forward(ctx, a, b, stats):
        with torch.no_grad():
            h = _scan_doubling(a, b, stats)
        ctx.save_for_backward(a, h)
        return h

    @staticmethod
    @torch.autograd.function.once_differentiable
    def backward(ctx, grad_h):
        a, h = ctx.saved_tensors
        rev_a = torch.cat([torch.zeros_like(a[:1]), a.flip(0)[:-1]])
        lam = _scan_doubling(rev_a, grad_h.flip(0), ScanStats()).flip(0)
        h_prev = torch.cat([torch.zeros_like(h[:1]), h[:-1]])
        return lam * h_prev, lam, None


def _scan_odd_even(a, b, stats):
    length = a.shape[0]
    if length == 1:
        return b
    odd = length % 2
    if odd:
        a = torch.cat([a, torch.ones_like(a[:1])])
        b = torch.cat([b, torch.zeros_like(b[:1])])
    a0, a1 = a[0::2], a[1::2]
    b0, b1 = b[0::2], b[1::2]
    stats.rounds += 1
    stats.combines += a1.shape[0]
    # pair (2k, 2k+1) reduced to one element; its prefix is the prefix at 2k+1
    h_odd = _scan_odd_even(a1 * a0, a1 * b0 + b1, stats)
    # even positions 2k (k >= 1) extend the prefix ending at 2k-1
    h_even_rest = a0[1:] * h_odd[:-1] + b0[1:]
    stats.rounds += 1
    stats.combines += h_even_rest.shape[0]
    h_even = torch.cat([b0[:1], h_even_rest])
    h = torch.stack([h_even, h_odd], dim=1).reshape(-1, *b.shape[1:])
    return h[:length]


def scan_parallel(
    a: torch.Tensor,
    b: torch.Tensor,
    dim: int = 1,
    algorithm: str = "doubling",
    stats: ScanStats | None = None,
) -> torch.Tensor:
    """All prefixes of the affine recurrence along ``dim``."""
    stats = stats if stats is not None else ScanStats()
    a = a.movedim(dim, 0)
    b = b.movedim(dim, 0)
    if algorithm == "doubling":
        if torch.is_grad_enabled() and (a.requires_grad or b.requires_grad):
            h = _DoublingScan.apply(a, b, stats)
        else:
            h = _scan_doubling(a, b, stats)
    elif algorithm == "work_efficient":
        h = _scan_odd_even(a, b, stats)
    else:
        raise ValueError(f"unknown scan algorithm {algorithm!r}")
    return h.movedim(0, dim)


def discretize(delta: torch.Tensor, A: torch.Tensor, B: torch.Tensor):
    """Zero-order hold on ``A``, Euler step on ``B``.

    ``delta`` is ``(..., E)``, ``A`` is ``(E, N)`` and ``B`` broadcasts
    against ``(..., N)``. Returns ``(A_bar, B_bar)`` of shape ``(..., E, N)``.
    """
    if not bool(torch.isfinite(delta).all()):
        raise NumericalError("non-finite discretization step delta")
    if not bool((delta > 0).all()):
        raise DomainError("discretization step delta must be strictly positive")
    d = delta.unsqueeze(-1)
    return torch.exp(d * A), d * B.unsqueeze(-2)


def selective_scan(
    x: torch.Tensor,
    delta: torch.Tensor,
    A: torch.Tensor,
    B: torch.Tensor,
    C: torch.Tensor,
    D: torch.Tensor | None = None,
    method: str = "parallel",
    algorithm: str = "doubling",
    stats: ScanStats | None = None,
) -> torch.Tensor:
    """``y_t = C_t . h_t + D * x_t`` for ``h_t = exp(delta_t A) h_{t-1} + delta_t B_t x_t``.

    Shapes: ``x, delta: (Bt, T, E)``, ``A: (E, N)``, ``B, C: (Bt, T, N)``
    (shared across the E channels), ``D: (E,)``.
    """
    a, bbar = discretize(delta, A, B)
    b = bbar * x.unsqueeze(-1)
    if method == "sequential":
        h = scan_sequential(a, b, dim=1)
    elif method == "parallel":
        h = scan_parallel(a, b, dim=1, algorithm=algorithm, stats=stats)
    else:
        raise ValueError(f"unknown scan method {method!r}")
    finite = torch.isfinite(h).reshape(h.shape[0], h.shape[1], -1).all(dim=-1).all(dim=0)
    if not bool(finite.all()):
        step = int((~finite).nonzero()[0])
        raise NumericalError(f"non-finite scan state at step {step}", step=step)
    y = (h * C.unsqueeze(-2)).sum(-1)
    if D is not None:
        y = y + D * x
    return y


def inverse_softplus(y: torch.Tensor) -> torch.Tensor:
    return y + torch.log(-torch.expm1(-y))


class SelectiveSSM(nn.Module):
    """Input-selective diagonal SSM over ``channels`` with ``state_size`` states each.

    ``B_t = W_B x_t + b_B`` and ``C_t = W_C x_t + b_C`` are shared across
    channels; ``delta_t = softplus(W_dt x_t + dt_bias)`` with ``W_dt`` a
    low-rank product. Zeroing the three projections leaves a time-invariant
    system driven by the biases.
    """

    def __init__(
        self,
        channels: int,
        state_size: int = 16,
        dt_rank: int | None = None,
        dt_min: float = 1e-3,
        dt_max: float = 1e-1,
        skip: bool = True,
    ):
        super().__init__()
        self.channels = channels
        self.state_size = state_size
        self.dt_rank = dt_rank or max(1, math.ceil(channels / 16))
        self.proj_B = nn.Linear(channels, state_size)
        self.proj_C = nn.Linear(channels, state_size)
        self.proj_dt_in = nn.Linear(channels, self.dt_rank, bias=False)
        self.proj_dt = nn.Linear(self.dt_rank, channels)
        # S4D-real initialisation: A = -(1..N)
        a = torch.arange(1, state_size + 1, dtype=torch.float32).repeat(channels, 1)
        self.A_log = nn.Parameter(torch.log(a))
        self.D = nn.Parameter(torch.ones(channels)) if skip else None

        nn.init.zeros_(self.proj_B.bias)
        nn.init.zeros_(self.proj_C.bias)
        nn.init.uniform_(self.proj_dt.weight, -self.dt_rank**-0.5, self.dt_rank**-0.5)
        dt = torch.exp(
            torch.rand(channels) * (math.log(dt_max) - math.log(dt_min)) + math.log(dt_min)
        )
        with torch.no_grad():
            self.proj_dt.bias.copy_(inverse_softplus(dt))

    @property
    def A(self) -> torch.Tensor:
        return -torch.exp(self.A_log)

    def selection(self, x: torch.Tensor):
        delta = F.softplus(self.proj_dt(self.proj_dt_in(x)))
        return delta, self.proj_B(x), self.proj_C(x)

    def forward(self, x: torch.Tensor, method: str = "parallel") -> torch.Tensor:
        delta, B, C = self.selection(x)
        return selective_scan(x, delta, self.A, B, C, self.D, method=method)
