"""Bidirectional temporal Mamba block."""
from __future__ import annotations

import torch
import torch.nn as nn

from .numeric import conv1d, silu
from .ssm import SelectiveSSM


class ScanBranch(nn.Module):
    """Depthwise causal conv -> SiLU -> selective scan, over ``channels``."""

    def __init__(self, channels: int, state_size: int = 16, conv_width: int = 4,
                 use_conv: bool = True, skip: bool = True):
        super().__init__()
        self.use_conv = use_conv
        if use_conv:
            self.conv_weight = nn.Parameter(torch.empty(channels, 1, conv_width))
            self.conv_bias = nn.Parameter(torch.zeros(channels))
            nn.init.uniform_(self.conv_weight, -conv_width**-0.5, conv_width**-0.5)
        self.ssm = SelectiveSSM(channels, state_size, skip=skip)

    def forward(self, x: torch.Tensor, method: str = "parallel") -> torch.Tensor:
        if self.use_conv:
            x = silu(conv1d(x, self.conv_weight, padding="causal",
                            bias=self.conv_bias, groups=x.shape[-1]))
        return self.ssm(x, method=method)


class BiTemporalBlock(nn.Module):
    """Normalise, split into ``X`` and gate ``Z``, scan ``X`` both ways, fuse.

    ``out = x + W_out((fwd(X) + rev(bwd(rev(X)))) * silu(Z))``
    """

    def __init__(self, d_model: int, expand: int = 2, state_size: int = 16,
                 conv_width: int = 4, use_conv: bool = True, skip: bool = True):
        super().__init__()
        inner = expand * d_model
        self.norm = nn.LayerNorm(d_model)
        self.in_proj = nn.Linear(d_model, 2 * inner, bias=False)
        self.forward_branch = ScanBranch(inner, state_size, conv_width, use_conv, skip)
        self.backward_branch = ScanBranch(inner, state_size, conv_width, use_conv, skip)
        self.out_proj = nn.Linear(inner, d_model, bias=False)

    def mix(self, x: torch.Tensor, method: str = "parallel") -> torch.Tensor:
        """The block without its residual connection."""
        X, Z = self.in_proj(self.norm(x)).chunk(2, dim=-1)
        gate = silu(Z)
        fwd = self.forward_branch(X, method)
        bwd = self.backward_branch(X.flip(1), method).flip(1)
        return self.out_proj(fwd * gate + bwd * gate)

    def forward(self, x: torch.Tensor, method: str = "parallel") -> torch.Tensor:
        return x + self.mix(x, method)
