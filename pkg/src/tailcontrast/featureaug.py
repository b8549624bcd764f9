"""Class-dependent feature augmentation.

Labeled features are blended with unlabeled features in feature space
while keeping the labeled sample's class. The blend coefficient is a
Beta draw clamped from below, so the labeled parent always dominates and
the label stays valid. A class is augmented with probability growing
with its scarcity: the head class is never augmented, the rarest class
almost always is. This manufactures extra (soft) minority-class entries
for the memory queues without touching image space.
"""
from __future__ import annotations

import dataclasses
from typing import List, Sequence

import numpy as np
import torch


@dataclasses.dataclass(frozen=True)
class FAConfig:
    """Feature-augmentation knobs.

    Attributes:
        alpha: Beta(alpha, alpha) shape for the raw mixture draw.
        mu: lower clamp on the mixture coefficient, in [0.5, 1].
        start_fraction: fraction of training after which augmentation
            activates (it needs a structured feature space to blend in).
    """

    alpha: float = 0.5
    mu: float = 0.8
    start_fraction: float = 0.8

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if not 0.5 <= self.mu <= 1.0:
            raise ValueError(f"mu must be in [0.5, 1], got {self.mu}")
        if not 0.0 <= self.start_fraction <= 1.0:
            raise ValueError(f"start_fraction must be in [0, 1], got {self.start_fraction}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclasses.dataclass
class AugmentedFeature:
    """A blended feature carrying its labeled parent's class."""

    feature: torch.Tensor
    label: int
    lam: float


def fa_probability(labeled_counts: Sequence[int]) -> np.ndarray:
    """Per-class augmentation probability (head_count - count_k) / head_count."""
    counts = np.asarray(labeled_counts, dtype=np.float64)
    if counts.size == 0 or np.any(counts <= 0):
        raise ValueError("labeled counts must be positive")
    head = counts.max()
    return (head - counts) / head


def sample_lambda(alpha: float, mu: float, rng: np.random.Generator) -> float:
    """Beta(alpha, alpha) draw folded and clamped into [mu, 1]."""
    lam = rng.beta(alpha, alpha)
    return max(lam, 1.0 - lam, mu)


def augment_batch(
    labeled_features: torch.Tensor,
    labels: Sequence[int],
    unlabeled_features: torch.Tensor,
    fa_probs: np.ndarray,
    cfg: FAConfig,
    rng: np.random.Generator,
) -> List[AugmentedFeature]:
    """Blend each labeled feature, with its class's probability, into a new entry.

    A labeled sample of class k spawns at most one augmented feature per
    step: with probability ``fa_probs[k]`` it is blended with a uniformly
    drawn unlabeled partner from the batch; otherwise nothing is emitted.
    With an empty unlabeled batch augmentation is silently skipped (the
    caller counts the skip).
    """
    out: List[AugmentedFeature] = []
    n_unlabeled = unlabeled_features.shape[0] if unlabeled_features is not None else 0
    if n_unlabeled == 0:
        return out
    for i, label in enumerate(labels):
        if rng.random() >= fa_probs[int(label)]:
            continue
        partner = int(rng.integers(0, n_unlabeled))
        lam = sample_lambda(cfg.alpha, cfg.mu, rng)
        blended = lam * labeled_features[i] + (1.0 - lam) * unlabeled_features[partner]
        out.append(AugmentedFeature(feature=blended, label=int(label), lam=lam))
    return out
