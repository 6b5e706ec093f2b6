"""The full denoiser ``f(x_t, t, c) -> x0_hat`` and its checkpoint format."""
from __future__ import annotations

import dataclasses
import math
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import torch
import torch.nn as nn

from .dsfm import DSFM
from .errors import ConfigError, ShapeError
from .kinematics import get_layout
from .numeric import read_tensor, write_tensor
from .partition import default_tables
from .spatial import DualSpatialBlock
from .temporal import BiTemporalBlock

CKPT_MAGIC = b"HSTFCKPT"
CKPT_VERSION = 1


@dataclass
class DenoiserConfig:
    n_temporal: int = 3  # N: bi-temporal blocks per layer group
    n_layers: int = 2  # L: layer groups
    d_model: int = 256
    feature_width: int = 0  # 0 -> taken from the skeleton's feature layout
    state_size: int = 16
    expand: int = 2
    reduction: int = 4
    part_width: int = 64
    cond_mask_prob: float = 0.1
    skeleton: str = "humanml3d_22"
    vocab_size: int = 4096

    def __post_init__(self):
        if self.feature_width == 0:
            self.feature_width = get_layout(self.skeleton).width
        if self.n_temporal < 2:
            raise ConfigError(f"n_temporal must be >= 2, got {self.n_temporal}")
        if self.n_layers < 1:
            raise ConfigError(f"n_layers must be >= 1, got {self.n_layers}")
        if self.d_model % self.reduction:
            raise ConfigError(f"d_model {self.d_model} not divisible by reduction {self.reduction}")
        if not 0.0 <= self.cond_mask_prob <= 1.0:
            raise ConfigError(f"cond_mask_prob must be in [0, 1], got {self.cond_mask_prob}")

    def to_dict(self) -> dict[str, str]:
        return {f.name: str(getattr(self, f.name)) for f in dataclasses.fields(self)}

    @classmethod
    def from_dict(cls, values: dict[str, str]) -> "DenoiserConfig":
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name in values:
                kwargs[f.name] = coerce(values[f.name], f.type)
        return cls(**kwargs)


def coerce(value, type_name):
    """Parse a config string into the field's declared type."""
    if not isinstance(value, str):
        return value
    kind = type_name if isinstance(type_name, str) else getattr(type_name, "__name__", "")
    try:
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
        if kind == "bool":
            if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return value.lower() in ("true", "1", "yes")
    except ValueError:
        raise ConfigError(f"cannot parse {value!r} as {kind}") from None
    return value


def tokenize(text: str) -> list[str]:
    return text.lower().split()


def token_ids(text: str, vocab_size: int = 4096) -> list[int]:
    return [zlib.crc32(tok.encode("utf-8")) % vocab_size for tok in tokenize(text)]


def timestep_features(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


class ConditionEmbedder(nn.Module):
    """Hash-bag text stub plus a timestep MLP, summed into one token."""

    def __init__(self, d_model: int, vocab_size: int = 4096):
        super().__init__()
        self.d_model = d_model
        self.vocab_size = vocab_size
        self.token_table = nn.Embedding(vocab_size, d_model)
        nn.init.normal_(self.token_table.weight, std=d_model**-0.5)
        self.null = nn.Parameter(torch.randn(d_model) * d_model**-0.5)
        self.time_mlp = nn.Sequential(
            nn.Linear(d_model, d_model), nn.SiLU(), nn.Linear(d_model, d_model)
        )

    def embed_text(self, texts: Sequence[str]) -> torch.Tensor:
        dtype = self.null.dtype
        rows = []
        for text in texts:
            ids = token_ids(text, self.vocab_size)
            if ids:
                rows.append(self.token_table(torch.tensor(ids)).mean(0))
            else:
                rows.append(self.null)
        return torch.stack(rows).to(dtype)

    def forward(
        self,
        t: torch.Tensor,
        texts: Sequence[str] | None = None,
        mask: torch.Tensor | bool = False,
        text_embedding: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Condition tokens ``(B, D)``. ``text_embedding`` overrides the stub."""
        batch = t.shape[0]
        if text_embedding is None:
            if texts is None:
                text_embedding = self.null.expand(batch, -1)
            else:
                if len(texts) != batch:
                    raise ShapeError(f"{len(texts)} captions for a batch of {batch}")
                text_embedding = self.embed_text(texts)
        if text_embedding.shape != (batch, self.d_model):
            raise ShapeError(f"text embedding must be ({batch}, {self.d_model})")
        mask = torch.as_tensor(mask, dtype=torch.bool).expand(batch)
        c = torch.where(mask[:, None], self.null.expand(batch, -1), text_embedding)
        temb = self.time_mlp(timestep_features(t, self.d_model).to(self.null.dtype))
        return c + temb


class LayerGroup(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        table = default_tables(cfg.skeleton)
        self.temporal = nn.ModuleList(
            BiTemporalBlock(cfg.d_model, cfg.expand, cfg.state_size) for _ in range(cfg.n_temporal)
        )
        self.spatial = DualSpatialBlock(cfg.d_model, table, cfg.part_width, cfg.expand, cfg.state_size)
        self.fusion = DSFM(cfg.d_model, cfg.n_temporal, cfg.reduction)

    def forward(self, h: torch.Tensor, method: str = "parallel") -> torch.Tensor:
        temporal = []
        for block in self.temporal:
            h = block(h, method)
            temporal.append(h)
        spatial = self.spatial(h, method)
        return self.fusion(temporal, spatial)


class HistfDenoiser(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        self.condition = ConditionEmbedder(cfg.d_model, cfg.vocab_size)
        self.in_proj = nn.Linear(cfg.feature_width, cfg.d_model)
        self.groups = nn.ModuleList(LayerGroup(cfg) for _ in range(cfg.n_layers))
        self.out_norm = nn.LayerNorm(cfg.d_model)
        self.out_proj = nn.Linear(cfg.d_model, cfg.feature_width)

    def forward(self, x_t: torch.Tensor, t: torch.Tensor, cond: torch.Tensor,
                method: str = "parallel") -> torch.Tensor:
        if x_t.dim() != 3 or x_t.shape[-1] != self.cfg.feature_width:
            raise ShapeError(
                f"expected motion (B, T, {self.cfg.feature_width}), got {tuple(x_t.shape)}"
            )
        if cond.shape != (x_t.shape[0], self.cfg.d_model):
            raise ShapeError(f"condition must be ({x_t.shape[0]}, {self.cfg.d_model})")
        h = torch.cat([cond[:, None], self.in_proj(x_t)], dim=1)
        for group in self.groups:
            h = group(h, method)
        return self.out_proj(self.out_norm(h[:, 1:]))

    def denoise(self, x_t, t, texts=None, mask=False, text_embedding=None):
        cond = self.condition(t, texts, mask, text_embedding)
        return self(x_t, t, cond)


def param_count(cfg: DenoiserConfig) -> int:
    return sum(p.numel() for p in HistfDenoiser(cfg).parameters() if p.requires_grad)


# ----------------------------------------------------------------------------
# checkpoints


def _write_str(fh, s: str) -> None:
    data = s.encode("utf-8")
    fh.write(struct.pack("<H", len(data)))
    fh.write(data)


def _read_str(fh) -> str:
    (n,) = struct.unpack("<H", fh.read(2))
    return fh.read(n).decode("utf-8")


def _write_block(fh, pairs: dict[str, str]) -> None:
    fh.write(struct.pack("<I", len(pairs)))
    for k, v in pairs.items():
        _write_str(fh, k)
        _write_str(fh, str(v))


def _read_block(fh) -> dict[str, str]:
    (n,) = struct.unpack("<I", fh.read(4))
    return {_read_str(fh): _read_str(fh) for _ in range(n)}


def save_checkpoint(path, cfg: DenoiserConfig, tensors: dict[str, torch.Tensor],
                    meta: dict[str, str] | None = None) -> None:
    """Write magic, version, config block, meta block, then named tensors."""
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<H", CKPT_VERSION))
        _write_block(fh, cfg.to_dict())
        _write_block(fh, meta or {})
        fh.write(struct.pack("<I", len(tensors)))
        for name, t in tensors.items():
            _write_str(fh, name)
            write_tensor(fh, t)
    tmp.replace(path)


def load_checkpoint(path):
    """Returns ``(config, tensors, meta)``."""
    with open(path, "rb") as fh:
        if fh.read(len(CKPT_MAGIC)) != CKPT_MAGIC:
            raise ConfigError(f"{path} is not a checkpoint")
        (version,) = struct.unpack("<H", fh.read(2))
        if version != CKPT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {version}")
        cfg = DenoiserConfig.from_dict(_read_block(fh))
        meta = _read_block(fh)
        (n,) = struct.unpack("<I", fh.read(4))
        tensors = {}
        for _ in range(n):
            name = _read_str(fh)
            tensors[name] = read_tensor(fh)
    return cfg, tensors, meta


def load_model(path) -> tuple[HistfDenoiser, dict[str, torch.Tensor], dict[str, str]]:
    cfg, tensors, meta = load_checkpoint(path)
    model = HistfDenoiser(cfg)
    state = {k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")}
    model.load_state_dict(state)
    return model, tensors, meta
