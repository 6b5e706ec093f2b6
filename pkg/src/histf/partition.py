"""Whole-body <-> six-part column gather/scatter."""
from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Mapping

import torch

from .errors import ConfigError, PartitionError, ShapeError
from .kinematics import CHAINS, PART_NAMES, FeatureLayout, get_layout


@dataclass(frozen=True)
class PartitionTable:
    parts: tuple[tuple[str, tuple[int, ...]], ...]
    width: int

    def __post_init__(self):
        names = [n for n, _ in self.parts]
        if sorted(names) != sorted(PART_NAMES) or len(names) != len(PART_NAMES):
            raise PartitionError(f"partition needs exactly the parts {PART_NAMES}, got {names}")
        owner: dict[int, str] = {}
        dupes, out_of_range = [], []
        for name, cols in self.parts:
            if not cols:
                raise PartitionError(f"part {name} is empty")
            for c in cols:
                if not 0 <= c < self.width:
                    out_of_range.append(c)
                elif c in owner:
                    dupes.append(c)
                owner.setdefault(c, name)
        uncovered = sorted(set(range(self.width)) - owner.keys())
        if dupes or uncovered or out_of_range:
            raise PartitionError(
                f"invalid partition of width {self.width}: duplicate columns {sorted(dupes)}, "
                f"uncovered columns {uncovered}, out of range {sorted(out_of_range)}"
            )

    @classmethod
    def from_mapping(cls, parts: Mapping[str, list[int]], width: int | None = None):
        if width is None:
            width = sum(len(v) for v in parts.values())
        ordered = tuple((n, tuple(int(c) for c in parts[n])) for n in PART_NAMES if n in parts)
        extra = set(parts) - set(PART_NAMES)
        if extra or len(ordered) != len(PART_NAMES):
            raise PartitionError(f"partition needs exactly the parts {PART_NAMES}, got {sorted(parts)}")
        return cls(ordered, width)

    def __getitem__(self, name: str) -> tuple[int, ...]:
        for n, cols in self.parts:
            if n == name:
                return cols
        raise KeyError(name)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.parts)

    @property
    def widths(self) -> dict[str, int]:
        return {n: len(c) for n, c in self.parts}

    def to_text(self) -> str:
        return "".join(f"{n} {' '.join(map(str, sorted(c)))}\n" for n, c in self.parts)

    @classmethod
    def from_text(cls, text: str, width: int | None = None) -> "PartitionTable":
        parts = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            name, *cols = line.split()
            if name in parts:
                raise PartitionError(f"line {lineno}: part {name} listed twice")
            try:
                parts[name] = [int(c) for c in cols]
            except ValueError:
                raise PartitionError(f"line {lineno}: non-integer column index") from None
            if parts[name] != sorted(parts[name]):
                raise PartitionError(f"line {lineno}: column indices must be ascending")
        return cls.from_mapping(parts, width)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path: str | Path, width: int | None = None) -> "PartitionTable":
        return cls.from_text(Path(path).read_text(), width)


class PartSet(dict):
    """Six part tensors keyed by part name, sharing every leading extent."""

    def __init__(self, parts: Mapping[str, torch.Tensor]):
        super().__init__(parts)
        lead = {tuple(p.shape[:-1]) for p in self.values()}
        if len(lead) > 1:
            raise PartitionError(f"parts disagree on leading extents: {sorted(lead)}")


def table_from_layout(layout: FeatureLayout, chains: Mapping[str, tuple[int, ...]]) -> PartitionTable:
    """Group whole joints' feature columns into parts by kinematic chain."""
    parts = {
        name: sorted(c for j in joints for c in layout.joint_columns[j])
        for name, joints in chains.items()
    }
    return PartitionTable.from_mapping(parts, layout.width)


def default_tables(skeleton: str) -> PartitionTable:
    """Load the shipped partition table for ``humanml3d_22``, ``kit_21`` or ``toy``."""
    if skeleton not in CHAINS:
        raise ConfigError(f"unknown skeleton {skeleton!r}; known: {sorted(CHAINS)}")
    text = resources.files("histf").joinpath("tables").joinpath(f"{skeleton}.txt").read_text()
    return PartitionTable.from_text(text, get_layout(skeleton).width)


def whole2parts(x: torch.Tensor, table: PartitionTable) -> PartSet:
    if x.shape[-1] != table.width:
        raise PartitionError(
            f"feature width {x.shape[-1]} does not match partition width {table.width}"
        )
    return PartSet({
        name: x[..., list(cols)] for name, cols in table.parts
    })


def parts2whole(parts: Mapping[str, torch.Tensor], table: PartitionTable) -> torch.Tensor:
    missing = [n for n in table.names if n not in parts]
    if missing:
        raise PartitionError(f"missing parts {missing}")
    for name, cols in table.parts:
        if parts[name].shape[-1] != len(cols):
            raise PartitionError(
                f"part {name} has width {parts[name].shape[-1]}, table expects {len(cols)}"
            )
    order = [c for _, cols in table.parts for c in cols]
    inverse = [0] * table.width
    for pos, c in enumerate(order):
        inverse[c] = pos
    stacked = torch.cat([parts[name] for name in table.names], dim=-1)
    return stacked[..., inverse]


def stack_parts(parts: Mapping[str, torch.Tensor], names: tuple[str, ...] = PART_NAMES) -> torch.Tensor:
    """Equal-width parts ``(B, ...)`` -> ``(len(names) * B, ...)``, part-major."""
    widths = {parts[n].shape for n in names}
    if len(widths) != 1:
        raise ShapeError(f"parts must share a shape to stack, got {sorted(widths)}")
    return torch.cat([parts[n] for n in names], dim=0)


def unstack_parts(x: torch.Tensor, names: tuple[str, ...] = PART_NAMES) -> dict[str, torch.Tensor]:
    chunks = x.chunk(len(names), dim=0)
    return dict(zip(names, chunks))
