"""Dual-spatial block: a part-based and a whole-based branch summed together."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .numeric import conv1d, silu
from .partition import PartitionTable, parts2whole, stack_parts, unstack_parts, whole2parts
from .ssm import SelectiveSSM


class PartBranch(nn.Module):
    """Latent -> feature layout -> six parts -> per-part conv -> shared Part SSM -> whole.

    Each part is projected to the common ``part_width`` so the six parts can be
    stacked on the batch axis and scanned over time by one SSM.
    """

    def __init__(self, d_model: int, table: PartitionTable, part_width: int = 32,
                 state_size: int = 16, kernel_size: int = 3):
        super().__init__()
        self.table = table
        self.names = table.names
        self.unproject = nn.Linear(d_model, table.width)
        self.part_in = nn.ModuleDict({n: nn.Linear(w, part_width) for n, w in table.widths.items()})
        # one 2-D kernel over the (time x part-feature) plane per body part
        self.part_kernels = nn.Parameter(torch.empty(len(self.names), 1, kernel_size, kernel_size))
        self.part_kernel_bias = nn.Parameter(torch.zeros(len(self.names)))
        nn.init.uniform_(self.part_kernels, -1.0 / kernel_size, 1.0 / kernel_size)
        self.ssm = SelectiveSSM(part_width, state_size)
        self.part_out = nn.ModuleDict({n: nn.Linear(part_width, w) for n, w in table.widths.items()})
        self.project = nn.Linear(table.width, d_model)

    def local_features(self, h: torch.Tensor) -> dict[str, torch.Tensor]:
        """Per-part activations right before the Part SSM."""
        parts = whole2parts(self.unproject(h), self.table)
        lat = torch.stack([self.part_in[n](parts[n]) for n in self.names], dim=1)  # B,6,T,P
        k = self.part_kernels.shape[-1]
        conv = F.conv2d(lat, self.part_kernels, self.part_kernel_bias,
                        padding=k // 2, groups=len(self.names))
        return {n: silu(conv[:, i]) for i, n in enumerate(self.names)}

    def forward(self, h: torch.Tensor, method: str = "parallel") -> torch.Tensor:
        local = self.local_features(h)
        scanned = unstack_parts(self.ssm(stack_parts(local, self.names), method), self.names)
        parts = {n: self.part_out[n](scanned[n]) for n in self.names}
        return self.project(parts2whole(parts, self.table))


class WholeBranch(nn.Module):
    def __init__(self, d_model: int, expand: int = 2, state_size: int = 16, kernel_size: int = 3):
        super().__init__()
        inner = expand * d_model
        self.conv = nn.Conv1d(d_model, inner, kernel_size)
        nn.init.zeros_(self.conv.bias)
        self.ssm = SelectiveSSM(inner, state_size)
        self.project = nn.Linear(inner, d_model)
        nn.init.zeros_(self.project.bias)

    def forward(self, h: torch.Tensor, method: str = "parallel") -> torch.Tensor:
        z = silu(conv1d(h, self.conv.weight, padding="same", bias=self.conv.bias))
        return self.project(self.ssm(z, method))


class DualSpatialBlock(nn.Module):
    def __init__(self, d_model: int, table: PartitionTable, part_width: int = 32,
                 expand: int = 2, state_size: int = 16):
        super().__init__()
        self.norm = nn.LayerNorm(d_model)
        self.part_branch = PartBranch(d_model, table, part_width, state_size)
        self.whole_branch = WholeBranch(d_model, expand, state_size)

    def forward(self, x: torch.Tensor, method: str = "parallel") -> torch.Tensor:
        h = self.norm(x)
        return x + self.whole_branch(h, method) + self.part_branch(h, method)
