"""Dynamic spatiotemporal fusion.

Query and key come from a channel projection of the first ``N-1`` temporal
features, the value from the last one. Key, query and value are shrunk along
the feature axis by a strided convolution (factor ``s``), attention runs over
time, a linear map restores width ``D``, and the result is concatenated with
the spatial feature and projected back to ``D``.
"""
from __future__ import annotations

import math
from typing import Sequence

import torch
import torch.nn as nn

from .errors import ConfigError, ShapeError
from .numeric import softmax


class FeatureReduction(nn.Module):
    """Strided conv along the feature axis: kernel ``s``, stride ``s``, one channel."""

    def __init__(self, factor: int):
        super().__init__()
        self.factor = factor
        self.weight = nn.Parameter(torch.full((factor,), 1.0 / factor))
        self.bias = nn.Parameter(torch.zeros(()))

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        d = y.shape[-1]
        return (y.unflatten(-1, (d // self.factor, self.factor)) * self.weight).sum(-1) + self.bias


class DSFM(nn.Module):
    def __init__(self, d_model: int, n_temporal: int, reduction: int = 4, scale: str = "reduced"):
        super().__init__()
        if n_temporal < 2:
            raise ConfigError(f"fusion needs at least 2 temporal features, got {n_temporal}")
        if d_model % reduction:
            raise ConfigError(f"d_model {d_model} is not divisible by reduction {reduction}")
        if scale not in ("reduced", "literal"):
            raise ConfigError(f"unknown attention scale {scale!r}")
        self.n_temporal = n_temporal
        self.reduction = reduction
        self.scale = scale
        self.channel_proj = nn.Linear(n_temporal - 1, 2)  # W1: (N-1)C -> 2C with C = 1
        self.reduce_k = FeatureReduction(reduction)
        self.reduce_v = FeatureReduction(reduction)
        self.expand_v = nn.Linear(d_model // reduction, d_model)
        self.fuse_proj = nn.Linear(2 * d_model, d_model)  # W2

    def build_query_key(self, temporal: Sequence[torch.Tensor]):
        if len(temporal) != self.n_temporal:
            raise ConfigError(f"expected {self.n_temporal} temporal features, got {len(temporal)}")
        stacked = torch.stack(list(temporal[:-1]), dim=-1)  # ..., T, D, N-1
        key, query = self.channel_proj(stacked).unbind(-1)
        return query, key

    def reduced_attention(self, query, key, last):
        if query.shape[-1] % self.reduction:
            raise ConfigError(
                f"feature width {query.shape[-1]} is not divisible by reduction {self.reduction}"
            )
        q = self.reduce_k(query)
        k = self.reduce_k(key)
        v = self.reduce_v(last)
        scores = q @ k.transpose(-1, -2)
        if self.scale == "reduced":
            weights = softmax(scores / math.sqrt(q.shape[-1]), axis=-1)
        else:
            weights = softmax(scores, axis=-1) / math.sqrt(self.n_temporal / self.reduction)
        return self.expand_v(weights @ v), weights

    def fuse(self, temporal_feat: torch.Tensor, spatial: torch.Tensor) -> torch.Tensor:
        if temporal_feat.shape != spatial.shape:
            raise ShapeError(
                f"cannot fuse temporal {tuple(temporal_feat.shape)} with spatial {tuple(spatial.shape)}"
            )
        return self.fuse_proj(torch.cat([spatial, temporal_feat], dim=-1))

    def forward(self, temporal: Sequence[torch.Tensor], spatial: torch.Tensor) -> torch.Tensor:
        query, key = self.build_query_key(temporal)
        refined, _ = self.reduced_attention(query, key, temporal[-1])
        return self.fuse(refined, spatial)
