"""Evaluation protocols: sampled-pool retrieval, full-pool text retrieval,
two-way identification over feature files, PixCorr, SSIM, and zero-shot
classification against averaged prompt embeddings.

All evaluators are pure functions of (inputs, seed). Ranking ties are broken
toward failure in retrieval and count half credit in two-way identification.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import convolve2d

from .numerics import l2_normalize

__all__ = [
    "RetrievalReport",
    "FeatureSet",
    "retrieval_eval",
    "text_retrieval_eval",
    "two_way_identification",
    "pixcorr",
    "ssim",
    "zero_shot_classify",
    "classification_accuracy",
]


@dataclass
class RetrievalReport:
    image_at1: float
    brain_at1: float
    text_at5: float
    pool_size: int
    iterations: int
    seed: int

    def __post_init__(self):
        for name in ("image_at1", "brain_at1", "text_at5"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be a fraction in [0, 1], got {value}")


@dataclass
class FeatureSet:
    """Precomputed per-layer features for ground truth and reconstructions."""

    gt: dict[str, np.ndarray]
    recon: dict[str, np.ndarray]

    def __post_init__(self):
        if set(self.gt) != set(self.recon):
            raise ValueError("ground-truth and reconstruction layers must match")
        for name in self.gt:
            if len(self.gt[name]) != len(self.recon[name]):
                raise ValueError(f"layer {name!r}: row counts differ")


def retrieval_eval(
    query_emb: np.ndarray,
    candidate_emb: np.ndarray,
    pool: int,
    iterations: int,
    k: int,
    rng: np.random.Generator,
) -> float:
    """Top-k accuracy with sampled candidate pools.

    Per query, pool-1 distractors are drawn without replacement (the true
    match excluded, then inserted), candidates are ranked by cosine, and a hit
    requires the true match among the top k with ties counting against it.
    Accuracies are averaged over queries, then over iterations.
    """
    q = l2_normalize(np.asarray(query_emb, dtype=np.float64))
    c = l2_normalize(np.asarray(candidate_emb, dtype=np.float64))
    if q.shape != c.shape:
        raise ValueError(f"query/candidate shapes differ: {q.shape} vs {c.shape}")
    n = q.shape[0]
    if pool > n:
        raise ValueError(f"pool {pool} exceeds the {n} available candidates")
    scores = q @ c.T
    per_iteration = []
    for _ in range(iterations):
        hits = 0
        for i in range(n):
            others = rng.choice(n - 1, size=pool - 1, replace=False)
            others = others + (others >= i)
            distractors = scores[i, others]
            rank = int((distractors >= scores[i, i]).sum())
            hits += rank < k
        per_iteration.append(hits / n)
    return float(np.mean(per_iteration))


def text_retrieval_eval(
    b_cls: np.ndarray, caption_cls: np.ndarray, k: int, true_idx: np.ndarray | None = None
) -> float:
    """Full-pool top-k caption retrieval; true_idx defaults to the identity."""
    q = l2_normalize(np.asarray(b_cls, dtype=np.float64))
    pool = l2_normalize(np.asarray(caption_cls, dtype=np.float64))
    n, m = q.shape[0], pool.shape[0]
    if true_idx is None:
        true_idx = np.arange(n)
    true_idx = np.asarray(true_idx)
    if np.any(true_idx < 0) or np.any(true_idx >= m):
        raise ValueError(f"true caption indices out of range [0, {m})")
    scores = q @ pool.T
    true_scores = scores[np.arange(n), true_idx]
    better = (scores >= true_scores[:, None]).sum(axis=1) - 1  # ties count against
    return float((better < k).mean())


def _standardize_rows(x: np.ndarray, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    mu = x.mean(axis=1, keepdims=True)
    sd = x.std(axis=1, keepdims=True)
    if np.any(sd <= 1e-12):
        raise ValueError(f"{name} contains a zero-variance row")
    return (x - mu) / sd


def two_way_identification(gt_features: np.ndarray, recon_features: np.ndarray) -> float:
    """Percent of pairwise comparisons in which the matched reconstruction
    correlates better with its ground truth than the alternative does."""
    g = _standardize_rows(gt_features, "gt_features")
    r = _standardize_rows(recon_features, "recon_features")
    if g.shape != r.shape:
        raise ValueError(f"feature shapes differ: {g.shape} vs {r.shape}")
    n, f = g.shape
    if n < 2:
        raise ValueError("two-way identification needs at least 2 samples")
    corr = (g @ r.T) / f
    diag = np.diag(corr)
    greater = (diag[:, None] > corr).sum(axis=1)
    equal = (diag[:, None] == corr).sum(axis=1) - 1  # drop the self comparison
    per_sample = (greater + 0.5 * equal) / (n - 1)
    return float(per_sample.mean() * 100.0)


def pixcorr(gt: np.ndarray, recon: np.ndarray) -> float:
    """Mean per-pair Pearson correlation of flattened pixels."""
    g = _standardize_rows(gt, "gt")
    r = _standardize_rows(recon, "recon")
    if g.shape != r.shape:
        raise ValueError(f"image batch shapes differ: {g.shape} vs {r.shape}")
    return float((g * r).mean(axis=1).mean())


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-0.5 * (ax / sigma) ** 2)
    w = np.outer(g, g)
    return w / w.sum()


def ssim(
    gt: np.ndarray, recon: np.ndarray, k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0
) -> float:
    """Structural similarity of two grayscale images scaled to [0, 1], using
    an 11x11 Gaussian window with sigma 1.5, averaged over window positions."""
    x = np.asarray(gt, dtype=np.float64)
    y = np.asarray(recon, dtype=np.float64)
    if x.ndim != 2 or x.shape != y.shape:
        raise ValueError(f"expected two equal 2-D images, got {x.shape} and {y.shape}")
    if min(x.shape) < 11:
        raise ValueError(f"image {x.shape} smaller than the 11x11 window")
    w = _gaussian_window()
    mu_x = convolve2d(x, w, mode="valid")
    mu_y = convolve2d(y, w, mode="valid")
    sxx = convolve2d(x * x, w, mode="valid") - mu_x * mu_x
    syy = convolve2d(y * y, w, mode="valid") - mu_y * mu_y
    sxy = convolve2d(x * y, w, mode="valid") - mu_x * mu_y
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2)
    return float((num / den).mean())


def zero_shot_classify(b_cls: np.ndarray, class_weights: np.ndarray) -> np.ndarray:
    """Class indices ranked by descending cosine similarity to b_cls."""
    weights = l2_normalize(np.asarray(class_weights, dtype=np.float64))
    v = np.asarray(b_cls, dtype=np.float64).ravel()
    v = l2_normalize(v)
    scores = weights @ v
    return np.argsort(-scores, kind="stable").astype(np.int64)


def classification_accuracy(
    cls_rows: np.ndarray, class_weights: np.ndarray, labels: np.ndarray, k: int
) -> float:
    """Top-k hit rate of zero_shot_classify over a batch of CLS embeddings."""
    labels = np.asarray(labels)
    hits = 0
    for row, label in zip(np.asarray(cls_rows), labels):
        hits += int(label) in zero_shot_classify(row, class_weights)[:k]
    return hits / len(labels)
