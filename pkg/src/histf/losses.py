"""Training objectives: reconstruction, joint position, foot contact and velocity."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch

from .errors import ConfigError, ShapeError
from .kinematics import FeatureLayout


@dataclass
class LossWeights:
    pos: float = 1.0
    vel: float = 1.0
    foot: float = 1.0

    def __post_init__(self):
        for name in ("pos", "vel", "foot"):
            if getattr(self, name) < 0:
                raise ConfigError(f"loss weight {name} must be nonnegative")


def motion_losses(
    x0: torch.Tensor,
    x0_hat: torch.Tensor,
    foot_mask: torch.Tensor,
    layout: FeatureLayout,
    weights: LossWeights | None = None,
    fk: Callable[[torch.Tensor], torch.Tensor] | None = None,
    l1: bool = False,
    foot_on_prediction: bool = False,
) -> dict[str, torch.Tensor]:
    """All four loss terms and their weighted total for ``(B, N, F)`` motions.

    ``fk`` maps features to joint positions ``(B, N, J, 3)``; by default the
    layout's positional columns are read directly. ``foot_mask`` is
    ``(B, N, n_feet)`` or ``(B, N-1, n_feet)`` with entries in {0, 1}, one
    column per ``layout.contact_joints`` entry; frame ``i`` gates the
    displacement from ``i`` to ``i+1``. The contact term uses the ground
    truth only, unless ``foot_on_prediction`` is set.
    """
    weights = weights or LossWeights()
    if x0.shape != x0_hat.shape or x0.dim() != 3:
        raise ShapeError(f"motions must share a (B, N, F) shape: {tuple(x0.shape)} vs {tuple(x0_hat.shape)}")
    b, n, _ = x0.shape
    feet = list(layout.contact_joints)
    if foot_mask.dim() != 3 or foot_mask.shape[0] != b or foot_mask.shape[2] != len(feet) \
            or foot_mask.shape[1] not in (n, n - 1):
        raise ShapeError(
            f"foot mask {tuple(foot_mask.shape)} does not fit motion {tuple(x0.shape)} with {len(feet)} feet"
        )
    fk = fk or layout.positions

    diff = x0 - x0_hat
    simple = diff.abs().mean() if l1 else (diff ** 2).mean()

    pos_true = fk(x0)
    pos_pred = fk(x0_hat)
    pos = ((pos_true - pos_pred) ** 2).sum(dim=(-1, -2)).mean()

    if n < 2:
        zero = x0.new_zeros(())
        vel = foot = zero
    else:
        dv = (x0[:, 1:] - x0[:, :-1]) - (x0_hat[:, 1:] - x0_hat[:, :-1])
        vel = (dv ** 2).sum(-1).mean()
        src = pos_pred if foot_on_prediction else pos_true
        step = src[:, 1:, feet] - src[:, :-1, feet]  # B, N-1, n_feet, 3
        f = foot_mask[:, : n - 1].to(step.dtype).unsqueeze(-1)
        foot = ((step * f) ** 2).sum(dim=(-1, -2)).mean()

    total = simple + weights.pos * pos + weights.vel * vel + weights.foot * foot
    return {"simple": simple, "pos": pos, "foot": foot, "vel": vel, "total": total}
