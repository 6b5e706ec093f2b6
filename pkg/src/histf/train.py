"""Run configuration and the deterministic, resumable training loop."""
from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .data import MotionSequence
from .diffusion import NoiseSchedule, q_sample
from .errors import ConfigError, DataError, NumericalError
from .kinematics import get_layout
from .losses import LossWeights, motion_losses
from .model import DenoiserConfig, HistfDenoiser, coerce, load_checkpoint, save_checkpoint

LOG_COLUMNS = ("step", "simple", "pos", "foot", "vel", "total")
CKPT_SUFFIX = ".hckpt"


@dataclass
class RunConfig:
    model: DenoiserConfig = field(default_factory=DenoiserConfig)
    schedule: str = "cosine"
    diffusion_steps: int = 1000
    lr: float = 1e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 64
    train_steps: int = 1000
    n_frames: int = 32
    checkpoint_every: int = 500
    lambda_pos: float = 1.0
    lambda_vel: float = 1.0
    lambda_foot: float = 1.0
    l1_loss: bool = False
    foot_on_prediction: bool = False
    seed: int = 0
    data_dir: str = "data"
    out_dir: str = "run"
    sample_steps: int = 10
    guidance: float = 2.5
    eval_dim: int = 32
    eval_seed: int = 0
    diversity_pairs: int = 300
    mm_reps: int = 10
    aits_captions: int = 8

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.train_steps < 0 or self.n_frames < 2:
            raise ConfigError("lr, batch_size, train_steps and n_frames must be positive (n_frames >= 2)")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")
        self.loss_weights  # validates sign

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_pos, self.lambda_vel, self.lambda_foot)

    def run_fields(self) -> dict[str, str]:
        return {f.name: str(getattr(self, f.name)) for f in dataclasses.fields(self) if f.name != "model"}

    def flat(self) -> dict[str, str]:
        return {**self.model.to_dict(), **self.run_fields()}

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.flat().items())

    @classmethod
    def from_flat(cls, values: dict[str, str]) -> "RunConfig":
        model_keys = {f.name for f in dataclasses.fields(DenoiserConfig)}
        run_types = {f.name: f.type for f in dataclasses.fields(cls) if f.name != "model"}
        unknown = set(values) - model_keys - set(run_types)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        model = DenoiserConfig.from_dict({k: v for k, v in values.items() if k in model_keys})
        kwargs = {k: coerce(v, run_types[k]) for k, v in values.items() if k in run_types}
        return cls(model=model, **kwargs)


def parse_config(text: str) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        values[key.strip()] = value.strip()
    return values


def load_config(path, overrides: dict[str, str] | None = None) -> RunConfig:
    values = {}
    if path is not None:
        try:
            values = parse_config(Path(path).read_text())
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
    values.update(overrides or {})
    return RunConfig.from_flat(values)


def step_generator(seed: int, step: int) -> torch.Generator:
    """Randomness for one training step depends only on (seed, step)."""
    state = np.random.SeedSequence([seed, step]).generate_state(1, dtype=np.uint64)[0]
    g = torch.Generator()
    g.manual_seed(int(state >> np.uint64(1)))
    return g


class Normalizer:
    """Per-feature standardisation fitted on the training frames."""

    def __init__(self, mean: torch.Tensor, std: torch.Tensor):
        self.mean = mean
        self.std = std

    @classmethod
    def fit(cls, motions: Sequence[MotionSequence], floor: float = 1e-2) -> "Normalizer":
        frames = torch.from_numpy(np.concatenate([m.frames for m in motions])).to(torch.float32)
        return cls(frames.mean(0), frames.std(0).clamp_min(floor))

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return (x - self.mean) / self.std

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return z * self.std + self.mean


class Trainer:
    def __init__(self, run: RunConfig, motions: Sequence[MotionSequence], normalizer: Normalizer | None = None):
        if not motions:
            raise DataError("training needs at least one motion")
        self.run = run
        cfg = run.model
        self.layout = get_layout(cfg.skeleton)
        for i, m in enumerate(motions):
            if m.width != cfg.feature_width:
                raise DataError(f"motion {i} has width {m.width}, model expects {cfg.feature_width}")
            if m.n_frames < run.n_frames:
                raise DataError(f"motion {i} has {m.n_frames} frames, training crops {run.n_frames}")
        self.motions = [torch.tensor(m.frames, dtype=torch.float32) for m in motions]  # copies
        self.captions = [m.caption or "" for m in motions]
        self.normalizer = normalizer or Normalizer.fit(motions)
        self.schedule = NoiseSchedule.make(run.schedule, run.diffusion_steps)
        with torch.random.fork_rng():
            torch.manual_seed(run.seed)
            self.model = HistfDenoiser(cfg)
        self.optimizer = torch.optim.AdamW(
            self.model.parameters(), lr=run.lr, betas=(run.beta1, run.beta2), weight_decay=run.weight_decay
        )
        self.step = 0

    def batch(self, g: torch.Generator):
        n = len(self.motions)
        size = self.run.batch_size
        if size <= n:
            idx = torch.randperm(n, generator=g)[:size].tolist()
        else:
            idx = torch.randint(0, n, (size,), generator=g).tolist()
        clips = []
        for i in idx:
            m = self.motions[i]
            start = int(torch.randint(0, m.shape[0] - self.run.n_frames + 1, (1,), generator=g))
            clips.append(m[start:start + self.run.n_frames])
        return torch.stack(clips), [self.captions[i] for i in idx]

    def losses(self, x0_raw: torch.Tensor, texts: list[str], g: torch.Generator) -> dict[str, torch.Tensor]:
        b = x0_raw.shape[0]
        x0 = self.normalizer.encode(x0_raw)
        t = torch.randint(0, self.schedule.steps, (b,), generator=g)
        eps = torch.randn(x0.shape, generator=g)
        mask = torch.rand(b, generator=g) < self.run.model.cond_mask_prob
        x_t = q_sample(x0, t, eps, self.schedule)
        x0_hat = self.model.denoise(x_t, t, texts, mask=mask)
        foot_mask = (self.layout.contacts(x0_raw) > 0.5).to(x0.dtype)
        fk = lambda z: self.layout.positions(self.normalizer.decode(z))
        return motion_losses(x0, x0_hat, foot_mask, self.layout, self.run.loss_weights, fk=fk,
                             l1=self.run.l1_loss, foot_on_prediction=self.run.foot_on_prediction)

    def train_step(self) -> dict[str, float]:
        g = step_generator(self.run.seed, self.step)
        x0_raw, texts = self.batch(g)
        self.model.train()
        try:
            out = self.losses(x0_raw, texts, g)
        except NumericalError as e:
            raise NumericalError(f"training step {self.step}: {e}", step=self.step) from e
        values = {k: v.item() for k, v in out.items()}
        if not all(np.isfinite(list(values.values()))):
            raise NumericalError(f"non-finite loss at training step {self.step}: {values}", step=self.step)
        self.optimizer.zero_grad(set_to_none=True)
        out["total"].backward()
        self.optimizer.step()
        self.step += 1
        return values

    def fit(self, steps: int, log_path=None, ckpt_dir=None,
            callback: Callable[["Trainer", dict], None] | None = None) -> list[dict[str, float]]:
        """Run ``steps`` more steps, appending to the CSV log and checkpointing periodically."""
        rows = []
        fh = writer = None
        if log_path is not None:
            log_path = Path(log_path)
            fresh = not log_path.exists() or log_path.stat().st_size == 0
            fh = open(log_path, "a", newline="")
            writer = csv.writer(fh, lineterminator="\n")
            if fresh:
                writer.writerow(LOG_COLUMNS)
        try:
            for _ in range(steps):
                step = self.step
                values = self.train_step()
                row = {"step": step, **values}
                rows.append(row)
                if writer is not None:
                    writer.writerow([step] + [repr(values[k]) for k in LOG_COLUMNS[1:]])
                    fh.flush()
                if ckpt_dir is not None and self.step % self.run.checkpoint_every == 0:
                    self.save(Path(ckpt_dir) / f"step-{self.step:07d}{CKPT_SUFFIX}")
                if callback is not None:
                    callback(self, row)
        finally:
            if fh is not None:
                fh.close()
        return rows

    def tensors(self) -> dict[str, torch.Tensor]:
        out = {f"model.{k}": v.detach().clone() for k, v in self.model.state_dict().items()}
        names = {id(p): n for n, p in self.model.named_parameters()}
        for group in self.optimizer.param_groups:
            for p in group["params"]:
                for key, value in self.optimizer.state.get(p, {}).items():
                    out[f"optim.{names[id(p)]}.{key}"] = torch.as_tensor(value).detach().clone()
        out["norm.mean"] = self.normalizer.mean
        out["norm.std"] = self.normalizer.std
        return out

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(path, self.run.model, self.tensors(), {**self.run.run_fields(), "step": str(self.step)})
        return path

    @classmethod
    def resume(cls, path, motions: Sequence[MotionSequence]) -> "Trainer":
        cfg, tensors, meta = load_checkpoint(path)
        meta = dict(meta)
        step = int(meta.pop("step", "0"))
        run = RunConfig.from_flat({**cfg.to_dict(), **meta})
        trainer = cls(run, motions, Normalizer(tensors["norm.mean"], tensors["norm.std"]))
        trainer.model.load_state_dict(
            {k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")}
        )
        params = dict(trainer.model.named_parameters())
        for name, p in params.items():
            state = {key: tensors[f"optim.{name}.{key}"] for key in ("step", "exp_avg", "exp_avg_sq")
                     if f"optim.{name}.{key}" in tensors}
            if state:
                trainer.optimizer.state[p] = state
        trainer.step = step
        return trainer


def load_normalizer(tensors: dict[str, torch.Tensor]) -> Normalizer:
    if "norm.mean" not in tensors:
        raise ConfigError("checkpoint carries no normalisation statistics")
    return Normalizer(tensors["norm.mean"], tensors["norm.std"])
