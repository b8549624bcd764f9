"""Confidence-weighted contrastive loss against the labeled memory.

Each confidently pseudo-labeled unlabeled embedding is pulled toward the
queued labeled embeddings of its pseudo-class and pushed from all other
queued embeddings. Pair weights are the product of the anchor's
pseudo-label confidence and the queue entry's label confidence, so
uncertain anchors and heavily-blended augmented entries both contribute
proportionally less. Positives and negatives come exclusively from the
labeled-feature memory, never from other unlabeled samples.
"""
from __future__ import annotations

import dataclasses

import torch

from .memory import MemorySnapshot


@dataclasses.dataclass
class ContrastiveBatch:
    """Anchors plus the queue view they score against.

    ``confidence`` entries are either 0 (sample opted out) or in (tau, 1].
    The queue view must predate any pushes made in the same step.
    """

    embeddings: torch.Tensor    # [B, d] strong-view embeddings, unit norm
    pseudo_class: torch.Tensor  # [B] long
    confidence: torch.Tensor    # [B]
    queue: MemorySnapshot


def confidence_vector(blended_probs: torch.Tensor, tau: float) -> torch.Tensor:
    """Peak blended-pseudo-label probability where strictly above tau, else 0."""
    peak = blended_probs.max(dim=-1).values
    return torch.where(peak > tau, peak, torch.zeros_like(peak))


def weight_matrix(confidence: torch.Tensor, label_confidence: torch.Tensor) -> torch.Tensor:
    """Pair weights: outer product of anchor and queue-entry confidences."""
    return confidence.unsqueeze(-1) * label_confidence.unsqueeze(0)


def contrastive_loss(batch: ContrastiveBatch, temperature: float) -> tuple[torch.Tensor, int]:
    """Batch-mean contrastive loss and the number of skipped anchors.

    Per anchor i with confidence s_i > 0 and a nonempty pseudo-class
    queue, the loss averages over that class's queue entries p:

        -(1 / fill(class_i)) * sum_p  s_i * v_p * log softmax_p

    where the softmax runs over every queue entry of every class at the
    given temperature and similarities are cosine. Anchors whose
    pseudo-class queue is empty contribute zero and are counted in the
    returned skip total; gradients flow only into the anchor embeddings.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    n_anchors = batch.embeddings.shape[0]
    zero = batch.embeddings.sum() * 0.0  # keeps the graph alive for autograd callers
    if n_anchors == 0:
        return zero, 0

    fill = torch.tensor(batch.queue.fill, dtype=torch.long)
    anchor_fill = fill[batch.pseudo_class]
    active = (batch.confidence > 0) & (anchor_fill > 0)
    skipped = int(((batch.confidence > 0) & (anchor_fill == 0)).sum())
    if batch.queue.total == 0 or not bool(active.any()):
        return zero, skipped

    anchors = batch.embeddings / batch.embeddings.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    queue = batch.queue.embeddings.detach().to(anchors.dtype)
    queue = queue / queue.norm(dim=-1, keepdim=True).clamp_min(1e-12)

    logits = (anchors @ queue.T) / temperature                      # [B, N]
    log_ratio = logits - torch.logsumexp(logits, dim=1, keepdim=True)
    positive = batch.queue.classes.unsqueeze(0) == batch.pseudo_class.unsqueeze(1)
    weights = weight_matrix(batch.confidence, batch.queue.label_confidence.to(anchors.dtype))
    per_anchor = -(positive * weights * log_ratio).sum(dim=1)
    per_anchor = per_anchor / anchor_fill.clamp_min(1).to(anchors.dtype)
    per_anchor = per_anchor * active.to(anchors.dtype)
    return per_anchor.sum() / n_anchors, skipped
