"""Generation and evaluation on top of a trained checkpoint."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import MotionSequence
from .diffusion import NoiseSchedule, sample
from .errors import DataError
from .kinematics import get_layout
from .metrics import (
    StatsProjectionExtractor,
    aits,
    diversity,
    fid,
    mm_dist,
    multimodality,
    r_precision,
)
from .model import HistfDenoiser, load_model
from .train import Normalizer, RunConfig, load_normalizer

REPORT_KEYS = (
    "r_precision_top1",
    "r_precision_top2",
    "r_precision_top3",
    "fid",
    "mm_dist",
    "diversity",
    "multimodality",
    "aits_mean_s",
    "aits_std_s",
)


@dataclass
class Generator:
    """A loaded denoiser with its normalisation and noise schedule."""

    model: HistfDenoiser
    normalizer: Normalizer
    schedule: NoiseSchedule

    @classmethod
    def from_checkpoint(cls, path) -> tuple["Generator", RunConfig]:
        model, tensors, meta = load_model(path)
        meta = {k: v for k, v in meta.items() if k != "step"}
        run = RunConfig.from_flat({**model.cfg.to_dict(), **meta})
        model.eval()
        return cls(model, load_normalizer(tensors), NoiseSchedule.make(run.schedule, run.diffusion_steps)), run

    def generate(self, texts: Sequence[str], n_frames: int, steps: int | None = 10,
                 guidance: float = 2.5, seed: int = 0) -> np.ndarray:
        """Raw-feature motions ``(len(texts), n_frames, F)``."""
        if n_frames < 1:
            raise DataError("need at least one frame")
        z = sample(self.model, list(texts), n_frames, self.schedule, guidance=guidance, steps=steps, seed=seed)
        return self.normalizer.decode(z).numpy()

    def motion(self, text: str, n_frames: int, steps: int | None = 10, guidance: float = 2.5,
               seed: int = 0) -> MotionSequence:
        frames = self.generate([text], n_frames, steps, guidance, seed)[0]
        layout = get_layout(self.model.cfg.skeleton)
        return MotionSequence(frames, self.model.cfg.skeleton, layout.fps, text)


def _metric(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except DataError as e:
        raise DataError(f"{name}: {e}") from e


def evaluate(
    motions: Sequence[MotionSequence],
    run: RunConfig,
    generator: Generator | None = None,
    source: str = "generated",
    seed: int = 0,
    steps: int | None = None,
    guidance: float | None = None,
) -> dict[str, float]:
    """All five metrics plus timing, keyed by :data:`REPORT_KEYS`.

    ``source="real"`` scores the dataset against itself (no model needed,
    timing reported as NaN); ``"generated"`` produces one motion per
    caption and ``run.mm_reps`` motions per distinct caption.
    """
    if source not in ("generated", "real"):
        raise DataError(f"unknown evaluation source {source!r}")
    if source == "generated" and generator is None:
        raise DataError("evaluating generated motions needs a checkpoint")
    steps = run.sample_steps if steps is None else steps
    guidance = run.guidance if guidance is None else guidance
    width = motions[0].width
    captions = [m.caption or "" for m in motions]
    real = [m.frames for m in motions]
    extractor = StatsProjectionExtractor(width, run.eval_dim, run.eval_seed)
    extractor.calibrate(captions, real)
    real_set = extractor.feature_set(real, captions, "real")

    distinct = sorted(set(captions))
    if source == "real":
        eval_set = real_set
        groups = [real_set.feats[[i for i, c in enumerate(captions) if c == text]] for text in distinct]
        timing = None
    else:
        n_frames = min(m.n_frames for m in motions)
        gen = generator.generate(captions, n_frames, steps, guidance, seed)
        eval_set = extractor.feature_set(list(gen), captions, "generated")
        groups = []
        for k, text in enumerate(distinct):
            reps = generator.generate([text] * run.mm_reps, n_frames, steps, guidance, seed + 1 + k)
            groups.append(extractor.motion_features(list(reps)))
        timed = distinct[: run.aits_captions] or captions[:1]
        timing = aits(lambda c: generator.generate([c], n_frames, steps, guidance, seed), timed)

    top = _metric("r_precision", r_precision, eval_set.feats, eval_set.text_feats)
    return {
        "r_precision_top1": top[0],
        "r_precision_top2": top[1],
        "r_precision_top3": top[2],
        "fid": _metric("fid", fid, eval_set, real_set),
        "mm_dist": _metric("mm_dist", mm_dist, eval_set.feats, eval_set.text_feats),
        "diversity": _metric("diversity", diversity, eval_set, run.diversity_pairs, seed),
        "multimodality": _metric("multimodality", multimodality, groups, run.mm_reps, seed),
        "aits_mean_s": timing.mean if timing else math.nan,
        "aits_std_s": timing.std if timing else math.nan,
    }


def format_report(metrics: dict[str, float], header: dict[str, str] | None = None) -> str:
    lines = [f"{k} = {v}" for k, v in (header or {}).items()]
    lines += [f"{k} = {metrics[k]:.6f}" for k in REPORT_KEYS]
    return "\n".join(lines) + "\n"


def snapshot_fid(generator: Generator, motions: Sequence[MotionSequence], run: RunConfig,
                 steps: int = 10, seed: int = 0) -> float:
    """FID of one generated motion per training caption against the training motions."""
    captions = [m.caption or "" for m in motions]
    n_frames = min(m.n_frames for m in motions)
    extractor = StatsProjectionExtractor(motions[0].width, run.eval_dim, run.eval_seed)
    gen = generator.generate(captions, n_frames, steps, run.guidance, seed)
    return fid(extractor.motion_features(list(gen)), extractor.motion_features([m.frames for m in motions]))


def trainer_generator(trainer) -> Generator:
    """Wrap a live trainer's model for sampling (shares weights)."""
    trainer.model.eval()
    return Generator(trainer.model, trainer.normalizer, trainer.schedule)
