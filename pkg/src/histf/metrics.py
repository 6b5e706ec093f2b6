"""Distribution and retrieval metrics over motion/text feature vectors.

Everything here runs in float64 numpy. Feature extraction is pluggable;
the default extractor is a fixed random projection of pooled per-sequence
statistics, so it needs no training and is reproducible per version.
"""
from __future__ import annotations

import csv
import statistics
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .errors import DataError, ShapeError
from .model import token_ids
from .numeric import tensor_from_bytes, tensor_to_bytes

POOL = 32


@dataclass
class FeatureSet:
    feats: np.ndarray  # (n, d)
    source: str = "real"  # "real" or "generated"
    texts: list[str] | None = None
    text_feats: np.ndarray | None = None

    def __post_init__(self):
        self.feats = np.asarray(self.feats, dtype=np.float64)
        if self.feats.ndim != 2:
            raise ShapeError(f"features must be (n, d), got {self.feats.shape}")
        if not np.isfinite(self.feats).all():
            raise DataError("feature set holds non-finite entries")
        if self.source not in ("real", "generated"):
            raise DataError(f"unknown feature source {self.source!r}")
        if self.texts is not None and len(self.texts) != len(self.feats):
            raise ShapeError(f"{len(self.texts)} texts for {len(self.feats)} feature rows")
        if self.text_feats is not None:
            self.text_feats = np.asarray(self.text_feats, dtype=np.float64)
            if self.text_feats.shape != self.feats.shape:
                raise ShapeError(f"text features {self.text_feats.shape} vs motion features {self.feats.shape}")

    def __len__(self) -> int:
        return len(self.feats)


def save_feature_set(fs: FeatureSet, out_dir) -> None:
    """Tensor files plus ``manifest.tsv`` listing row index, source and paired text."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "motion.hstf").write_bytes(tensor_to_bytes(torch.from_numpy(fs.feats)))
    if fs.text_feats is not None:
        (out / "text.hstf").write_bytes(tensor_to_bytes(torch.from_numpy(fs.text_feats)))
    with open(out / "manifest.tsv", "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(("row", "source", "text"))
        for i in range(len(fs)):
            w.writerow((i, fs.source, fs.texts[i] if fs.texts else ""))


def load_feature_set(in_dir) -> FeatureSet:
    root = Path(in_dir)
    feats = tensor_from_bytes((root / "motion.hstf").read_bytes()).numpy()
    text_path = root / "text.hstf"
    text_feats = tensor_from_bytes(text_path.read_bytes()).numpy() if text_path.exists() else None
    with open(root / "manifest.tsv", newline="") as fh:
        rows = list(csv.DictReader(fh, delimiter="\t"))
    source = rows[0]["source"] if rows else "real"
    texts = [r["text"] for r in rows] if rows and any(r["text"] for r in rows) else None
    return FeatureSet(feats, source, texts, text_feats)


# ----------------------------------------------------------------------------
# extractor


class StatsProjectionExtractor:
    """Motion -> projected (mean, std, mean |velocity|) per feature column.

    Texts map through a hashed bag of tokens projected to the same width,
    unless :meth:`calibrate` has attached per-caption centroids of real
    motion features, in which case known captions map to their centroid.
    """

    name = "stats-projection"
    version = 1

    def __init__(self, width: int, dim: int = 32, seed: int = 0, vocab_size: int = 4096):
        self.width = width
        self.dim = dim
        self.seed = seed
        self.vocab_size = vocab_size
        rng = np.random.default_rng([seed, self.version, width, dim])
        self.motion_proj = rng.standard_normal((3 * width, dim)) / np.sqrt(3 * width)
        self.text_proj = rng.standard_normal((vocab_size, dim))
        self.centroids: dict[str, np.ndarray] = {}

    @property
    def tag(self) -> str:
        return f"{self.name}-v{self.version}-w{self.width}-d{self.dim}-s{self.seed}"

    def motion_stats(self, motion) -> np.ndarray:
        x = np.asarray(motion, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.width:
            raise ShapeError(f"motion {x.shape} does not have width {self.width}")
        vel = np.abs(np.diff(x, axis=0)).mean(0) if len(x) > 1 else np.zeros(self.width)
        return np.concatenate([x.mean(0), x.std(0), vel])

    def motion_features(self, motions: Sequence) -> np.ndarray:
        return np.stack([self.motion_stats(m) @ self.motion_proj for m in motions])

    def text_features(self, texts: Sequence[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.dim))
        for i, text in enumerate(texts):
            if text in self.centroids:
                out[i] = self.centroids[text]
                continue
            ids = token_ids(text, self.vocab_size)
            if ids:
                out[i] = self.text_proj[ids].mean(0)
        return out

    def calibrate(self, texts: Sequence[str], motions: Sequence) -> None:
        feats = self.motion_features(motions)
        for text in sorted(set(texts)):
            rows = [i for i, t in enumerate(texts) if t == text]
            self.centroids[text] = feats[rows].mean(0)

    def feature_set(self, motions: Sequence, texts: Sequence[str] | None = None,
                    source: str = "real") -> FeatureSet:
        tf = self.text_features(texts) if texts is not None else None
        return FeatureSet(self.motion_features(motions), source,
                          list(texts) if texts is not None else None, tf)


# ----------------------------------------------------------------------------
# metrics


def _feats(x) -> np.ndarray:
    return (x.feats if isinstance(x, FeatureSet) else np.asarray(x, dtype=np.float64)).astype(np.float64)


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def fid(a, b) -> float:
    """Frechet distance between Gaussian fits of two feature sets.

    ``Tr((S_a S_b)^{1/2})`` is taken as the trace of the square root of
    the symmetric product ``S_a^{1/2} S_b S_a^{1/2}``, which has the same
    eigenvalues; negative eigenvalues from round-off are clipped to zero.
    """
    fa, fb = _feats(a), _feats(b)
    if fa.ndim != 2 or fb.ndim != 2 or fa.shape[1] != fb.shape[1]:
        raise ShapeError(f"feature widths differ: {fa.shape} vs {fb.shape}")
    if len(fa) < 2 or len(fb) < 2:
        raise DataError("fid needs at least two items per set")
    mu = fa.mean(0) - fb.mean(0)
    ca = np.atleast_2d(np.cov(fa, rowvar=False, ddof=1))
    cb = np.atleast_2d(np.cov(fb, rowvar=False, ddof=1))
    root_a = _psd_sqrt(ca)
    cross = root_a @ cb @ root_a
    w = np.linalg.eigvalsh((cross + cross.T) / 2)
    tr_sqrt = np.sqrt(np.clip(w, 0.0, None)).sum()
    return float(max(mu @ mu + np.trace(ca) + np.trace(cb) - 2.0 * tr_sqrt, 0.0))


def _pair_check(motion, text):
    m, t = _feats(motion), _feats(text)
    if m.shape != t.shape:
        raise ShapeError(f"paired features differ in shape: {m.shape} vs {t.shape}")
    return m, t


def r_precision(motion_feats, text_feats, pool: int = POOL, ks: Sequence[int] = (1, 2, 3)) -> tuple[float, ...]:
    """Fraction of items whose own text ranks within top-k of a ``pool``-sized candidate set.

    Items are pooled in order; a trailing partial pool is dropped. Ties
    count in the item's favour (rank = 1 + number of strictly closer texts).
    """
    m, t = _pair_check(motion_feats, text_feats)
    n_pools = len(m) // pool
    if n_pools == 0:
        raise DataError(f"r_precision needs at least {pool} paired items, got {len(m)}")
    hits = np.zeros(len(ks))
    for p in range(n_pools):
        mm = m[p * pool:(p + 1) * pool]
        tt = t[p * pool:(p + 1) * pool]
        d = np.linalg.norm(mm[:, None, :] - tt[None, :, :], axis=-1)
        own = np.diag(d)
        rank = 1 + (d < own[:, None]).sum(1)
        hits += [(rank <= k).sum() for k in ks]
    return tuple(float(h / (n_pools * pool)) for h in hits)


def mm_dist(motion_feats, text_feats) -> float:
    m, t = _pair_check(motion_feats, text_feats)
    if len(m) == 0:
        raise DataError("mm_dist needs at least one pair")
    return float(np.linalg.norm(m - t, axis=1).mean())


def diversity(feats, n_pairs: int = 300, seed: int = 0) -> float:
    """Mean distance over ``n_pairs`` disjoint random pairs."""
    f = _feats(feats)
    if n_pairs < 1 or len(f) < 2 * n_pairs:
        raise DataError(f"diversity needs at least {2 * n_pairs} items for {n_pairs} disjoint pairs, got {len(f)}")
    idx = np.random.default_rng(seed).permutation(len(f))[: 2 * n_pairs]
    return float(np.linalg.norm(f[idx[:n_pairs]] - f[idx[n_pairs:]], axis=1).mean())


def multimodality(groups: Sequence, reps: int = 10, seed: int = 0) -> float:
    """Mean pairwise distance among ``reps`` generations per text, averaged over texts."""
    if not groups:
        raise DataError("multimodality needs at least one group")
    rng = np.random.default_rng(seed)
    per_group = []
    for gi, g in enumerate(groups):
        g = _feats(g)
        if len(g) < max(reps, 2):
            raise DataError(f"multimodality group {gi} has {len(g)} items, needs {max(reps, 2)}")
        if len(g) > reps:
            g = g[np.sort(rng.choice(len(g), reps, replace=False))]
        d = np.linalg.norm(g[:, None, :] - g[None, :, :], axis=-1)
        iu = np.triu_indices(len(g), k=1)
        per_group.append(d[iu].mean())
    return float(np.mean(per_group))


@dataclass
class TimingReport:
    mean: float
    std: float
    samples: list[float]


def aits(generate_one: Callable[[str], object], captions: Sequence[str], repetitions: int = 1,
         warmup: int = 1) -> TimingReport:
    """Average wall-clock seconds per caption at batch size 1.

    ``generate_one`` must already hold a loaded model; ``warmup`` calls
    on the first caption are run first and not timed.
    """
    if not captions:
        raise DataError("aits needs at least one caption")
    for _ in range(warmup):
        generate_one(captions[0])
    samples = []
    for _ in range(repetitions):
        for c in captions:
            start = time.perf_counter()
            generate_one(c)
            samples.append(time.perf_counter() - start)
    std = statistics.stdev(samples) if len(samples) > 1 else 0.0
    return TimingReport(float(np.mean(samples)), float(std), samples)
