"""Construction of class-imbalanced labeled/unlabeled splits.

Per-class counts decay exponentially from the head class to the tail
class, controlled by a head count and an imbalance ratio. A split is
materialized as a manifest of per-class index lists into a source
dataset, serializable to JSON so that splits are shareable and
byte-stable across runs.
"""
from __future__ import annotations

import dataclasses
import json
from typing import List, Sequence

import numpy as np


class SplitError(ValueError):
    """Raised when a split cannot be built from the source dataset."""


@dataclasses.dataclass(frozen=True)
class SplitSpec:
    """Parameters of a long-tailed labeled/unlabeled split.

    Attributes:
        num_classes: number of classes K.
        head_labeled: labeled count of the head (most frequent) class.
        head_unlabeled: unlabeled count of the head class.
        gamma: imbalance ratio, head count / tail count, >= 1.
        seed: RNG seed used when drawing indices.
    """

    num_classes: int
    head_labeled: int
    head_unlabeled: int
    gamma: float
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise SplitError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.head_labeled < 1:
            raise SplitError(f"head_labeled must be >= 1, got {self.head_labeled}")
        if self.head_unlabeled < 0:
            raise SplitError(f"head_unlabeled must be >= 0, got {self.head_unlabeled}")
        if self.gamma < 1:
            raise SplitError(f"gamma must be >= 1, got {self.gamma}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SplitSpec":
        return cls(**d)


def longtail_counts(head: int, gamma: float, num_classes: int) -> List[int]:
    """Per-class counts decaying exponentially from ``head`` by ratio ``gamma``.

    Class k (0-indexed) receives ``round(head * gamma ** (-k / (K - 1)))``
    samples, clamped to a minimum of 1 so every class stays populated.

    Args:
        head: count for the most frequent class, >= 1.
        gamma: imbalance ratio between head and tail counts, >= 1.
        num_classes: number of classes, >= 2.

    Returns:
        A non-increasing list of ``num_classes`` positive integers; the first
        entry equals ``head`` and the last is approximately ``head / gamma``.
    """
    if head < 1:
        raise SplitError(f"head count must be >= 1, got {head}")
    if gamma < 1:
        raise SplitError(f"gamma must be >= 1, got {gamma}")
    if num_classes < 2:
        raise SplitError(f"num_classes must be >= 2, got {num_classes}")
    counts = []
    for k in range(num_classes):
        raw = head * gamma ** (-k / (num_classes - 1))
        counts.append(max(1, int(round(raw))))
    return counts


@dataclasses.dataclass
class SplitManifest:
    """Materialized long-tailed split: per-class index lists into a dataset.

    Labeled and unlabeled pools are disjoint. ``labeled_indices[k]`` holds
    the source-dataset indices of the labeled samples of class k.
    """

    spec: SplitSpec
    labeled_counts: List[int]
    unlabeled_counts: List[int]
    labeled_indices: List[List[int]]
    unlabeled_indices: List[List[int]]

    def flat_labeled(self) -> tuple[np.ndarray, np.ndarray]:
        """All labeled indices and their labels as flat arrays."""
        idx = np.concatenate([np.asarray(ix, dtype=np.int64) for ix in self.labeled_indices])
        lab = np.concatenate(
            [np.full(len(ix), k, dtype=np.int64) for k, ix in enumerate(self.labeled_indices)]
        )
        return idx, lab

    def flat_unlabeled(self) -> np.ndarray:
        """All unlabeled indices as one flat array (labels withheld)."""
        return np.concatenate(
            [np.asarray(ix, dtype=np.int64) for ix in self.unlabeled_indices]
        )

    def to_json(self) -> str:
        doc = {
            "spec": self.spec.to_dict(),
            "labeled_counts": [int(c) for c in self.labeled_counts],
            "unlabeled_counts": [int(c) for c in self.unlabeled_counts],
            "labeled_indices": [[int(i) for i in ix] for ix in self.labeled_indices],
            "unlabeled_indices": [[int(i) for i in ix] for ix in self.unlabeled_indices],
        }
        return json.dumps(doc, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "SplitManifest":
        doc = json.loads(text)
        return cls(
            spec=SplitSpec.from_dict(doc["spec"]),
            labeled_counts=doc["labeled_counts"],
            unlabeled_counts=doc["unlabeled_counts"],
            labeled_indices=doc["labeled_indices"],
            unlabeled_indices=doc["unlabeled_indices"],
        )

    def save(self, path) -> None:
        with open(path, "w") as f:
            f.write(self.to_json())

    @classmethod
    def load(cls, path) -> "SplitManifest":
        with open(path) as f:
            return cls.from_json(f.read())


def build_splits(labels: Sequence[int], spec: SplitSpec) -> SplitManifest:
    """Draw a deterministic long-tailed labeled/unlabeled split.

    Args:
        labels: per-sample class labels of the source dataset.
        spec: split parameters.

    Returns:
        A SplitManifest with disjoint labeled/unlabeled index pools whose
        per-class sizes match :func:`longtail_counts` exactly.

    Raises:
        SplitError: if any class has fewer than N_k + M_k source samples.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n_labeled = longtail_counts(spec.head_labeled, spec.gamma, spec.num_classes)
    if spec.head_unlabeled > 0:
        n_unlabeled = longtail_counts(spec.head_unlabeled, spec.gamma, spec.num_classes)
    else:
        n_unlabeled = [0] * spec.num_classes

    rng = np.random.default_rng(spec.seed)
    labeled_indices: List[List[int]] = []
    unlabeled_indices: List[List[int]] = []
    for k in range(spec.num_classes):
        pool = np.flatnonzero(labels == k)
        need = n_labeled[k] + n_unlabeled[k]
        if len(pool) < need:
            raise SplitError(
                f"class {k}: need {need} samples ({n_labeled[k]} labeled + "
                f"{n_unlabeled[k]} unlabeled) but source has only {len(pool)}"
            )
        pool = rng.permutation(pool)
        labeled_indices.append(sorted(int(i) for i in pool[: n_labeled[k]]))
        unlabeled_indices.append(
            sorted(int(i) for i in pool[n_labeled[k] : need])
        )

    return SplitManifest(
        spec=spec,
        labeled_counts=n_labeled,
        unlabeled_counts=n_unlabeled,
        labeled_indices=labeled_indices,
        unlabeled_indices=unlabeled_indices,
    )
