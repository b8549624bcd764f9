"""Class-balanced FIFO memory of labeled features and embeddings.

Each class owns three queues updated in lockstep: encoder features (for
prototype computation), projection-head embeddings (for the contrastive
loss), and a per-entry label confidence in (0, 1]. Raw labeled entries
carry confidence 1; feature-augmented entries carry their mixture
coefficient. Capacities are identical across classes so minority-class
prototypes are backed by as many points as head-class ones.
"""
from __future__ import annotations

import dataclasses
from collections import deque
from typing import Deque, List

import torch


@dataclasses.dataclass
class Prototypes:
    """Per-class mean feature; ``defined[k]`` is False while queue k is empty."""

    matrix: torch.Tensor      # [K, feature_dim]
    defined: torch.Tensor     # [K] bool


@dataclasses.dataclass
class MemorySnapshot:
    """Immutable flattened view of the embedding queues at one instant."""

    embeddings: torch.Tensor        # [N, embed_dim]
    classes: torch.Tensor           # [N] long
    label_confidence: torch.Tensor  # [N]
    fill: List[int]                 # per-class entry count

    @property
    def total(self) -> int:
        return int(self.embeddings.shape[0])


class ClassMemory:
    """K FIFO queues of (feature, embedding, label-confidence) triples."""

    def __init__(self, num_classes: int, capacity: int = 128):
        if num_classes < 1:
            raise ValueError(f"num_classes must be >= 1, got {num_classes}")
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {capacity}")
        self.num_classes = num_classes
        self.capacity = capacity
        self._features: List[Deque[torch.Tensor]] = [deque(maxlen=capacity) for _ in range(num_classes)]
        self._embeddings: List[Deque[torch.Tensor]] = [deque(maxlen=capacity) for _ in range(num_classes)]
        self._confidence: List[Deque[float]] = [deque(maxlen=capacity) for _ in range(num_classes)]
        self.pushed_raw = [0] * num_classes
        self.pushed_augmented = [0] * num_classes

    def push(self, class_index: int, feature: torch.Tensor, embedding: torch.Tensor, confidence: float) -> None:
        """Append one entry; the oldest entry of that class falls out when full.

        Raw labeled entries must carry confidence 1.0; augmented entries
        carry their mixture coefficient in (0, 1).
        """
        if not 0 <= class_index < self.num_classes:
            raise ValueError(f"class index {class_index} out of range [0, {self.num_classes})")
        if not 0.0 < confidence <= 1.0:
            raise ValueError(f"label confidence must be in (0, 1], got {confidence}")
        norm = float(embedding.norm())
        if abs(norm - 1.0) > 1e-3:
            raise ValueError(f"embedding must be unit-norm, got norm {norm:.6f}")
        # deques share maxlen, so appends stay in lockstep
        self._features[class_index].append(feature.detach().clone())
        self._embeddings[class_index].append(embedding.detach().clone())
        self._confidence[class_index].append(float(confidence))
        if confidence < 1.0:
            self.pushed_augmented[class_index] += 1
        else:
            self.pushed_raw[class_index] += 1

    def fill(self, class_index: int) -> int:
        return len(self._features[class_index])

    def fills(self) -> List[int]:
        return [len(q) for q in self._features]

    @property
    def all_populated(self) -> bool:
        return all(len(q) > 0 for q in self._features)

    def features(self, class_index: int) -> List[torch.Tensor]:
        return list(self._features[class_index])

    def embeddings(self, class_index: int) -> List[torch.Tensor]:
        return list(self._embeddings[class_index])

    def confidences(self, class_index: int) -> List[float]:
        return list(self._confidence[class_index])

    def prototypes(self) -> Prototypes:
        """Arithmetic mean of each feature queue, accumulated in float64.

        Empty classes are flagged undefined rather than fabricated; callers
        mask them out of similarity computations.
        """
        defined = torch.tensor([len(q) > 0 for q in self._features])
        dim = None
        for q in self._features:
            if q:
                dim = q[0].numel()
                dtype = q[0].dtype
                break
        if dim is None:
            return Prototypes(matrix=torch.zeros(self.num_classes, 0), defined=defined)
        matrix = torch.zeros(self.num_classes, dim, dtype=dtype)
        for k, q in enumerate(self._features):
            if q:
                matrix[k] = torch.stack(list(q)).double().mean(dim=0).to(dtype)
        return Prototypes(matrix=matrix, defined=defined)

    def snapshot(self) -> MemorySnapshot:
        """Flattened copy of the embedding queues for contrastive scoring."""
        embeds, classes, conf = [], [], []
        for k in range(self.num_classes):
            for e in self._embeddings[k]:
                embeds.append(e)
                classes.append(k)
            conf.extend(self._confidence[k])
        if not embeds:
            return MemorySnapshot(
                embeddings=torch.zeros(0, 0),
                classes=torch.zeros(0, dtype=torch.long),
                label_confidence=torch.zeros(0),
                fill=self.fills(),
            )
        return MemorySnapshot(
            embeddings=torch.stack(embeds),
            classes=torch.tensor(classes, dtype=torch.long),
            label_confidence=torch.tensor(conf, dtype=embeds[0].dtype),
            fill=self.fills(),
        )

    def state_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "capacity": self.capacity,
            "features": [list(q) for q in self._features],
            "embeddings": [list(q) for q in self._embeddings],
            "confidence": [list(q) for q in self._confidence],
            "pushed_raw": list(self.pushed_raw),
            "pushed_augmented": list(self.pushed_augmented),
        }

    def load_state_dict(self, state: dict) -> None:
        if state["num_classes"] != self.num_classes or state["capacity"] != self.capacity:
            raise ValueError("memory shape mismatch between checkpoint and configuration")
        for k in range(self.num_classes):
            self._features[k] = deque(state["features"][k], maxlen=self.capacity)
            self._embeddings[k] = deque(state["embeddings"][k], maxlen=self.capacity)
            self._confidence[k] = deque(state["confidence"][k], maxlen=self.capacity)
        self.pushed_raw = list(state["pushed_raw"])
        self.pushed_augmented = list(state["pushed_augmented"])
