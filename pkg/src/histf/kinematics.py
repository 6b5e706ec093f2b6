"""Skeletons, per-frame feature layouts and forward kinematics."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError, ShapeError

PART_NAMES = ("Root", "R_Leg", "L_Leg", "Backbone", "R_Arm", "L_Arm")


@dataclass(frozen=True)
class Skeleton:
    name: str
    parents: tuple[int, ...]
    offsets: np.ndarray  # (J, 3) rest-pose bone offsets from the parent
    foot_joints: tuple[int, ...]
    joint_names: tuple[str, ...] = ()

    def __post_init__(self):
        parents = self.parents
        if not parents or parents[0] != -1:
            raise ConfigError(f"{self.name}: joint 0 must be the root (parent -1)")
        n = len(parents)
        for j, p in enumerate(parents[1:], start=1):
            if not 0 <= p < n or p == j:
                raise ConfigError(f"{self.name}: joint {j} has invalid parent {p}")
        for j in range(n):
            seen = set()
            k = j
            while k != -1:
                if k in seen:
                    raise ConfigError(f"{self.name}: parent array has a cycle through joint {k}")
                seen.add(k)
                k = parents[k]
        if np.shape(self.offsets) != (n, 3):
            raise ConfigError(f"{self.name}: offsets must be ({n}, 3)")

    @property
    def n_joints(self) -> int:
        return len(self.parents)

    def order(self) -> list[int]:
        """Joints sorted so every parent precedes its children."""
        children = [[] for _ in self.parents]
        for j, p in enumerate(self.parents):
            if p >= 0:
                children[p].append(j)
        out, stack = [], [0]
        while stack:
            j = stack.pop()
            out.append(j)
            stack.extend(reversed(children[j]))
        return out


@dataclass(frozen=True)
class FeatureLayout:
    """Where each joint lives inside a flat per-frame feature vector.

    ``position_index[j]`` holds the three columns of joint ``j``'s position;
    ``-1`` marks a coordinate that is identically zero in this layout.
    """

    name: str
    width: int
    joint_columns: tuple[tuple[int, ...], ...]
    position_index: np.ndarray
    contact_columns: tuple[int, ...]
    contact_joints: tuple[int, ...]
    fps: float = 20.0

    def positions(self, x: torch.Tensor) -> torch.Tensor:
        """Joint positions ``(..., J, 3)`` read from features ``(..., width)``."""
        if x.shape[-1] != self.width:
            raise ShapeError(f"{self.name} expects width {self.width}, got {x.shape[-1]}")
        idx = torch.as_tensor(self.position_index, device=x.device)
        padded = torch.cat([x, x.new_zeros(*x.shape[:-1], 1)], dim=-1)
        idx = torch.where(idx < 0, torch.full_like(idx, self.width), idx)
        return padded[..., idx.reshape(-1)].reshape(*x.shape[:-1], *idx.shape)

    def contacts(self, x: torch.Tensor) -> torch.Tensor:
        return x[..., list(self.contact_columns)]


def _pos_layout(name: str, n_joints: int, contact_joints, fps: float) -> FeatureLayout:
    cols = [tuple(range(3 * j, 3 * j + 3)) for j in range(n_joints)]
    contact = tuple(range(3 * n_joints, 3 * n_joints + len(contact_joints)))
    cols[0] = cols[0] + contact
    return FeatureLayout(
        name=name,
        width=3 * n_joints + len(contact_joints),
        joint_columns=tuple(cols),
        position_index=np.arange(3 * n_joints).reshape(n_joints, 3),
        contact_columns=contact,
        contact_joints=tuple(contact_joints),
        fps=fps,
    )


def _guo_layout(name: str, n_joints: int, contact_joints, fps: float) -> FeatureLayout:
    """The redundant HumanML3D/KIT layout: root (4), ric, rot6d, velocity, contacts."""
    j = n_joints
    ric0 = 4
    rot0 = ric0 + 3 * (j - 1)
    vel0 = rot0 + 6 * (j - 1)
    con0 = vel0 + 3 * j
    width = con0 + len(contact_joints)
    cols = []
    for k in range(j):
        c = list(range(vel0 + 3 * k, vel0 + 3 * k + 3))
        if k == 0:
            c = list(range(0, 4)) + c + list(range(con0, width))
        else:
            c = (
                list(range(ric0 + 3 * (k - 1), ric0 + 3 * k))
                + list(range(rot0 + 6 * (k - 1), rot0 + 6 * k))
                + c
            )
        cols.append(tuple(sorted(c)))
    pos = np.full((j, 3), -1, dtype=np.int64)
    pos[0, 1] = 3  # root height; root x/z are relative to itself
    for k in range(1, j):
        pos[k] = np.arange(ric0 + 3 * (k - 1), ric0 + 3 * k)
    return FeatureLayout(
        name=name,
        width=width,
        joint_columns=tuple(cols),
        position_index=pos,
        contact_columns=tuple(range(con0, width)),
        contact_joints=tuple(contact_joints),
        fps=fps,
    )


# SMPL body joints as used by HumanML3D
HUMANML3D_PARENTS = (-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19)
HUMANML3D_NAMES = (
    "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee", "spine2",
    "left_ankle", "right_ankle", "spine3", "left_foot", "right_foot", "neck",
    "left_collar", "right_collar", "head", "left_shoulder", "right_shoulder",
    "left_elbow", "right_elbow", "left_wrist", "right_wrist",
)
HUMANML3D_OFFSETS = np.array([
    [0, 0, 0], [1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, -1, 0], [0, 1, 0],
    [0, -1, 0], [0, -1, 0], [0, 1, 0], [0, 0, 1], [0, 0, 1], [0, 1, 0], [1, 0, 0],
    [-1, 0, 0], [0, 0, 1], [0, -1, 0], [0, -1, 0], [0, -1, 0], [0, -1, 0], [0, -1, 0],
    [0, -1, 0],
], dtype=np.float64)
HUMANML3D_CHAINS = {
    "Root": (0,),
    "R_Leg": (2, 5, 8, 11),
    "L_Leg": (1, 4, 7, 10),
    "Backbone": (3, 6, 9, 12, 15),
    "R_Arm": (14, 17, 19, 21),
    "L_Arm": (13, 16, 18, 20),
}

# MMM skeleton as used by KIT-ML
KIT_PARENTS = (-1, 0, 1, 2, 3, 3, 5, 6, 3, 8, 9, 0, 11, 12, 13, 14, 0, 16, 17, 18, 19)
KIT_OFFSETS = np.array([
    [0, 0, 0], [0, 1, 0], [0, 1, 0], [0, 1, 0], [0, 1, 0], [1, 0, 0], [0, -1, 0],
    [0, -1, 0], [-1, 0, 0], [0, -1, 0], [0, -1, 0], [1, 0, 0], [0, -1, 0], [0, -1, 0],
    [0, 0, 1], [0, 0, 1], [-1, 0, 0], [0, -1, 0], [0, -1, 0], [0, 0, 1], [0, 0, 1],
], dtype=np.float64)
KIT_CHAINS = {
    "Root": (0,),
    "R_Leg": (11, 12, 13, 14, 15),
    "L_Leg": (16, 17, 18, 19, 20),
    "Backbone": (1, 2, 3, 4),
    "R_Arm": (5, 6, 7),
    "L_Arm": (8, 9, 10),
}

# 11-joint toy body used by the synthetic dataset (metres, y up, x to the left)
TOY_NAMES = (
    "pelvis", "right_knee", "right_foot", "left_knee", "left_foot", "spine", "head",
    "right_elbow", "right_hand", "left_elbow", "left_hand",
)
TOY_PARENTS = (-1, 0, 1, 0, 3, 0, 5, 5, 7, 5, 9)
TOY_OFFSETS = np.array([
    [0.0, 0.0, 0.0],
    [-0.1, -0.45, 0.0], [0.0, -0.45, 0.0],
    [0.1, -0.45, 0.0], [0.0, -0.45, 0.0],
    [0.0, 0.5, 0.0], [0.0, 0.25, 0.0],
    [-0.3, 0.0, 0.0], [-0.28, 0.0, 0.0],
    [0.3, 0.0, 0.0], [0.28, 0.0, 0.0],
])
TOY_CHAINS = {
    "Root": (0,),
    "R_Leg": (1, 2),
    "L_Leg": (3, 4),
    "Backbone": (5, 6),
    "R_Arm": (7, 8),
    "L_Arm": (9, 10),
}

SKELETONS = {
    "humanml3d_22": Skeleton("humanml3d_22", HUMANML3D_PARENTS, HUMANML3D_OFFSETS, (7, 10, 8, 11), HUMANML3D_NAMES),
    "kit_21": Skeleton("kit_21", KIT_PARENTS, KIT_OFFSETS, (19, 20, 14, 15)),
    "toy": Skeleton("toy", TOY_PARENTS, TOY_OFFSETS, (2, 4), TOY_NAMES),
}
CHAINS = {"humanml3d_22": HUMANML3D_CHAINS, "kit_21": KIT_CHAINS, "toy": TOY_CHAINS}
LAYOUTS = {
    "humanml3d_22": _guo_layout("humanml3d_22", 22, (7, 10, 8, 11), 20.0),
    "kit_21": _guo_layout("kit_21", 21, (19, 20, 14, 15), 12.5),
    "toy": _pos_layout("toy", 11, (2, 4), 20.0),
}


def get_skeleton(name: str) -> Skeleton:
    try:
        return SKELETONS[name]
    except KeyError:
        raise ConfigError(f"unknown skeleton {name!r}; known: {sorted(SKELETONS)}") from None


def get_layout(name: str) -> FeatureLayout:
    try:
        return LAYOUTS[name]
    except KeyError:
        raise ConfigError(f"unknown skeleton {name!r}; known: {sorted(LAYOUTS)}") from None


def axis_angle_to_matrix(v: torch.Tensor) -> torch.Tensor:
    """Rodrigues' formula, ``(..., 3) -> (..., 3, 3)``."""
    theta = v.norm(dim=-1, keepdim=True)
    small = theta < 1e-12
    safe = torch.where(small, torch.ones_like(theta), theta)
    k = v / safe
    kx, ky, kz = k.unbind(-1)
    zero = torch.zeros_like(kx)
    K = torch.stack([zero, -kz, ky, kz, zero, -kx, -ky, kx, zero], dim=-1).reshape(*v.shape[:-1], 3, 3)
    s = torch.sin(theta)[..., None]
    c = torch.cos(theta)[..., None]
    eye = torch.eye(3, dtype=v.dtype, device=v.device).expand_as(K)
    R = eye + s * K + (1 - c) * (K @ K)
    return torch.where(small[..., None], eye, R)


def forward_kinematics(
    frame: torch.Tensor,
    skeleton: Skeleton,
    mode: str = "identity",
    root_position: torch.Tensor | None = None,
) -> torch.Tensor:
    """Joint positions ``(..., J, 3)``.

    ``identity`` returns positions unchanged. ``chain`` takes local joint
    rotations, either matrices ``(..., J, 3, 3)`` or axis-angle ``(..., J, 3)``,
    and composes parent-to-child transforms down the tree from the rest
    offsets.
    """
    if mode == "identity":
        return frame
    if mode != "chain":
        raise ValueError(f"unknown FK mode {mode!r}")
    J = skeleton.n_joints
    if frame.dim() >= 3 and frame.shape[-3:] == (J, 3, 3):
        rot = frame
    elif frame.shape[-2:] == (J, 3):
        rot = axis_angle_to_matrix(frame)
    else:
        raise ShapeError(f"frame shape {tuple(frame.shape)} does not match {J} joints")
    batch = rot.shape[:-3]
    offsets = torch.as_tensor(skeleton.offsets, dtype=rot.dtype, device=rot.device)
    if root_position is None:
        root_position = rot.new_zeros(*batch, 3)
    glob = [None] * J
    pos = [None] * J
    for j in skeleton.order():
        p = skeleton.parents[j]
        if p < 0:
            glob[j] = rot[..., j, :, :]
            pos[j] = root_position
        else:
            glob[j] = glob[p] @ rot[..., j, :, :]
            pos[j] = pos[p] + (glob[p] @ offsets[j].unsqueeze(-1)).squeeze(-1)
    return torch.stack(pos, dim=-2)
