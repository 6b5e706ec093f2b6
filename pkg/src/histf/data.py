"""Motion files, caption manifests and the synthetic toy-skeleton dataset."""
from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import DataError
from .kinematics import axis_angle_to_matrix, forward_kinematics, get_layout, get_skeleton

MOTION_MAGIC = b"HSTFMOT"
MOTION_SUFFIX = ".hmot"
MANIFEST = "manifest.tsv"


@dataclass
class MotionSequence:
    frames: np.ndarray  # (T, F) float32
    skeleton: str
    fps: float = 20.0
    caption: str | None = None
    family: str | None = None

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def width(self) -> int:
        return self.frames.shape[1]


def write_motion(path, motion: MotionSequence, caption: bool = True) -> None:
    """Header, then little-endian float32 frames; the caption goes to a ``.txt`` sidecar."""
    path = Path(path)
    frames = np.ascontiguousarray(motion.frames, dtype="<f4")
    name = motion.skeleton.encode("ascii")
    try:
        with open(path, "wb") as fh:
            fh.write(MOTION_MAGIC)
            fh.write(struct.pack("<IIfB", frames.shape[0], frames.shape[1], motion.fps, len(name)))
            fh.write(name)
            fh.write(frames.tobytes())
        if caption and motion.caption is not None:
            path.with_suffix(".txt").write_text(motion.caption + "\n")
    except OSError as e:
        raise DataError(f"cannot write {path}: {e}") from e


def read_motion(path) -> MotionSequence:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e
    if not data.startswith(MOTION_MAGIC):
        raise DataError(f"{path} is not a motion file")
    off = len(MOTION_MAGIC)
    n, width, fps, name_len = struct.unpack_from("<IIfB", data, off)
    off += struct.calcsize("<IIfB")
    skeleton = data[off:off + name_len].decode("ascii")
    off += name_len
    if len(data) - off != 4 * n * width:
        raise DataError(f"{path}: payload size does not match {n}x{width} frames")
    frames = np.frombuffer(data, dtype="<f4", offset=off).reshape(n, width).astype(np.float32)
    side = path.with_suffix(".txt")
    caption = side.read_text().strip() if side.exists() else None
    return MotionSequence(frames, skeleton, float(fps), caption)


# ----------------------------------------------------------------------------
# synthetic motions on the toy skeleton

CAPTIONS = {
    "walk": ("a person walks forward", "someone walks straight ahead"),
    "circle": ("a person walks in a circle", "someone walks around in a circle"),
    "arm_raise": ("a person raises both arms", "someone lifts their arms up"),
    "turn": ("a person turns around in place", "someone spins in place"),
}
FAMILIES = tuple(CAPTIONS)
PELVIS_HEIGHT = 0.9
ARM_DOWN = 1.2  # shoulder roll (rad) from the horizontal rest pose


@dataclass
class SyntheticDatasetSpec:
    families: tuple[str, ...] = FAMILIES
    fps: float = 20.0
    length_range: tuple[int, int] = (32, 32)
    skeleton: str = "toy"
    jitter: float = 0.1  # relative spread of speed/amplitude within a family
    captions: dict[str, tuple[str, ...]] = field(default_factory=lambda: dict(CAPTIONS))

    def __post_init__(self):
        unknown = [f for f in self.families if f not in self.captions]
        if unknown:
            raise DataError(f"no caption templates for families {unknown}")


def _axis(angle: np.ndarray, axis: int) -> np.ndarray:
    v = np.zeros(angle.shape + (3,))
    v[..., axis] = angle
    return v


def _yaw_then(yaw: np.ndarray, local: np.ndarray) -> torch.Tensor:
    """Rotation matrices ``R_y(yaw) @ R(local)``."""
    return axis_angle_to_matrix(torch.from_numpy(_axis(yaw, 1))) @ axis_angle_to_matrix(torch.from_numpy(local))


def _gait(phase: np.ndarray, amp: float) -> np.ndarray:
    """Local axis-angle rotations (T, J, 3) for a walking cycle."""
    T = phase.shape[0]
    rot = np.zeros((T, 11, 3))
    swing = amp * np.sin(phase)
    rot[:, 1] = _axis(swing, 0)  # right hip
    rot[:, 3] = _axis(-swing, 0)  # left hip
    rot[:, 2] = _axis(-0.5 * amp * np.clip(np.sin(phase - 1.0), 0, None), 0)
    rot[:, 4] = _axis(-0.5 * amp * np.clip(np.sin(phase + math.pi - 1.0), 0, None), 0)
    hang = np.full_like(phase, ARM_DOWN)
    rot[:, 7] = _axis(hang, 2) + _axis(-0.6 * swing, 0)  # arms hang and swing
    rot[:, 9] = _axis(-hang, 2) + _axis(0.6 * swing, 0)
    return rot


def _family_motion(family: str, n: int, fps: float, rng: np.random.Generator, jitter: float):
    """Local rotations ``(n, J, 3)``, root yaw ``(n,)`` and root position ``(n, 3)``."""
    k = lambda: 1.0 + jitter * rng.uniform(-1, 1)
    time = np.arange(n) / fps
    root = np.zeros((n, 3))
    root[:, 1] = PELVIS_HEIGHT
    yaw = np.zeros(n)
    phase0 = rng.uniform(0, 2 * math.pi)
    if family == "walk":
        freq, speed = 1.8 * k(), 1.2 * k()
        rot = _gait(2 * math.pi * freq * time + phase0, 0.45 * k())
        root[:, 2] = speed * time
        root[:, 1] += 0.02 * np.cos(4 * math.pi * freq * time + 2 * phase0)
    elif family == "circle":
        freq, radius = 1.8 * k(), 1.0 * k()
        omega = 1.2 * k()
        rot = _gait(2 * math.pi * freq * time + phase0, 0.4 * k())
        ang = omega * time
        root[:, 0] = radius * (1 - np.cos(ang))
        root[:, 2] = radius * np.sin(ang)
        yaw = ang
    elif family == "arm_raise":
        rot = np.zeros((n, 11, 3))
        dur = n / fps
        lift = 0.5 - 0.5 * np.cos(math.pi * np.clip(time / (0.8 * dur * k()), 0, 1))
        shoulder = ARM_DOWN - lift * 2.6 * k()
        rot[:, 7] = _axis(shoulder, 2)
        rot[:, 9] = _axis(-shoulder, 2)
        rot[:, 5] = _axis(0.05 * np.sin(phase0 + time), 0)
    elif family == "turn":
        rate = 2.2 * k()
        rot = _gait(2 * math.pi * 1.2 * time + phase0, 0.15 * k())
        yaw = rate * time * rng.choice((-1.0, 1.0))
    else:
        raise DataError(f"unknown motion family {family!r}")
    return rot, yaw, root


def synth_motion(family: str, n_frames: int, spec: SyntheticDatasetSpec, rng: np.random.Generator) -> np.ndarray:
    """Toy-layout features ``(n_frames, 35)``: joint positions then foot contacts."""
    skel = get_skeleton(spec.skeleton)
    rot, yaw, root = _family_motion(family, n_frames, spec.fps, rng, spec.jitter)
    mats = axis_angle_to_matrix(torch.from_numpy(rot))
    mats[:, 0] = _yaw_then(yaw, rot[:, 0])
    pos = forward_kinematics(mats, skel, mode="chain", root_position=torch.from_numpy(root)).numpy()
    feet = list(get_layout(spec.skeleton).contact_joints)
    foot_pos = pos[:, feet]
    speed = np.zeros(foot_pos.shape[:2])
    speed[1:] = np.linalg.norm(foot_pos[1:] - foot_pos[:-1], axis=-1) * spec.fps
    speed[0] = speed[1] if n_frames > 1 else 0.0
    contact = ((foot_pos[..., 1] < 0.05) & (speed < 0.6)).astype(np.float64)
    return np.concatenate([pos.reshape(n_frames, -1), contact], axis=1).astype(np.float32)


def generate_dataset(spec: SyntheticDatasetSpec, n: int, seed: int) -> list[MotionSequence]:
    if n < 1:
        raise DataError("dataset size must be at least 1")
    rng = np.random.default_rng(seed)
    lo, hi = spec.length_range
    out = []
    for i in range(n):
        family = spec.families[i % len(spec.families)]
        templates = spec.captions[family]
        caption = templates[int(rng.integers(len(templates)))]
        length = int(rng.integers(lo, hi + 1))
        frames = synth_motion(family, length, spec, rng)
        out.append(MotionSequence(frames, spec.skeleton, spec.fps, caption, family))
    return out


def save_dataset(motions: list[MotionSequence], out_dir) -> Path:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        rows = []
        for i, m in enumerate(motions):
            name = f"{i:05d}{MOTION_SUFFIX}"
            write_motion(out / name, m)
            rows.append((name, m.family or "", m.caption or ""))
        with open(out / MANIFEST, "w", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(("file", "family", "caption"))
            w.writerows(rows)
    except OSError as e:
        raise DataError(f"cannot write dataset to {out}: {e}") from e
    return out


def load_dataset(data_dir) -> list[MotionSequence]:
    root = Path(data_dir)
    manifest = root / MANIFEST
    if not manifest.exists():
        raise DataError(f"no {MANIFEST} in {root}")
    motions = []
    with open(manifest, newline="") as fh:
        for row in csv.DictReader(fh, delimiter="\t"):
            m = read_motion(root / row["file"])
            m.caption = row["caption"] or m.caption
            m.family = row["family"] or None
            motions.append(m)
    if not motions:
        raise DataError(f"{root} holds no motions")
    return motions
