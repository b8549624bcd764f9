"""Pseudo-labels for unlabeled samples and the losses built on them.

Three distributions are produced per unlabeled sample: a linear one
(softmax of the classifier), a semantic one (softmax of prototype cosine
similarities over a temperature), and a blend of the two. The blend
leans on the semantic view exactly when the linear view's predicted
class is overrepresented among recent confident predictions, which is
where imbalance-driven bias concentrates.

The consistency loss trains the strong view against the blended
pseudo-label when it is confident; the alignment loss pulls the batch
mean of the semantic distribution toward a target (uniform by default).
"""
from __future__ import annotations

import dataclasses

import numpy as np
import torch
import torch.nn.functional as F

from . import diagnostics
from .memory import Prototypes

# probability clamp applied inside every log
EPS = 1e-8


def linear_pseudo_label(weak_features: torch.Tensor, classifier: torch.nn.Module) -> torch.Tensor:
    """Softmax of the linear classifier on weak-view features."""
    return F.softmax(classifier(weak_features), dim=-1)


def semantic_pseudo_label(
    weak_features: torch.Tensor, prototypes: Prototypes, temperature: float
) -> torch.Tensor:
    """Softmax of cosine similarity to class prototypes over a temperature.

    Classes whose prototype is undefined (empty queue) are masked to
    probability zero. A zero-norm feature has no direction, so all its
    similarities are defined as 0 (uniform over defined classes) and a
    warning counter is bumped.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    feats = weak_features
    num_classes = int(prototypes.defined.shape[0])
    if not bool(prototypes.defined.any()):
        # fully cold memory: no direction to compare against
        return torch.full((feats.shape[0], num_classes), 1.0 / num_classes, dtype=feats.dtype)
    norms = feats.norm(dim=-1, keepdim=True)
    zero_rows = (norms <= 1e-12).squeeze(-1)
    if bool(zero_rows.any()):
        diagnostics.bump("zero_norm_feature", int(zero_rows.sum()))
    unit_feats = feats / norms.clamp_min(1e-12)

    proto = prototypes.matrix.to(feats.dtype)
    proto_norms = proto.norm(dim=-1, keepdim=True)
    unit_proto = proto / proto_norms.clamp_min(1e-12)

    sims = unit_feats @ unit_proto.T
    sims[zero_rows] = 0.0
    logits = sims / temperature
    logits = logits.masked_fill(~prototypes.defined.to(feats.device), float("-inf"))
    return F.softmax(logits, dim=-1)


class ConfidentHistogram:
    """Decaying per-class histogram of recent confident linear pseudo-labels.

    Each observed label decays the stored counts by (1 - 1/window), so the
    histogram tracks roughly the last ``window`` confident predictions.
    """

    def __init__(self, num_classes: int, window: float = 1e4):
        if window <= 1:
            raise ValueError(f"window must be > 1, got {window}")
        self.num_classes = num_classes
        self.window = float(window)
        self.counts = np.zeros(num_classes, dtype=np.float64)

    def update(self, linear_probs: torch.Tensor, tau: float) -> None:
        conf, cls = linear_probs.max(dim=-1)
        confident = cls[conf >= tau]
        if confident.numel() == 0:
            return
        decay = 1.0 - 1.0 / self.window
        self.counts *= decay ** confident.numel()
        self.counts += np.bincount(confident.cpu().numpy(), minlength=self.num_classes)

    def blend_weights(self) -> np.ndarray:
        """Per-class weight in [0, 1], zero for classes at or below uniform share."""
        total = self.counts.sum()
        if total <= 0:
            return np.zeros(self.num_classes)
        freq = self.counts / total
        uniform = 1.0 / self.num_classes
        return np.clip((freq - uniform) / (1.0 - uniform), 0.0, 1.0)

    def state_dict(self) -> dict:
        return {"counts": self.counts.tolist(), "window": self.window}

    def load_state_dict(self, state: dict) -> None:
        self.counts = np.asarray(state["counts"], dtype=np.float64)
        self.window = float(state["window"])


def blend(
    linear_probs: torch.Tensor,
    semantic_probs: torch.Tensor,
    blend_weights: np.ndarray | torch.Tensor,
    cold: bool = False,
) -> torch.Tensor:
    """Convex combination of linear and semantic pseudo-labels.

    The weight is looked up per sample at the linear prediction's argmax
    class: the more that class dominates recent confident predictions,
    the more the semantic view is trusted. While the memory is cold
    (some class has no prototype yet) the weight degenerates to 0 and
    the linear label passes through unchanged.
    """
    if cold:
        return linear_probs
    w = torch.as_tensor(np.asarray(blend_weights), dtype=linear_probs.dtype, device=linear_probs.device)
    top_class = linear_probs.argmax(dim=-1)
    w_sample = w[top_class].unsqueeze(-1)
    mixed = (1.0 - w_sample) * linear_probs + w_sample * semantic_probs
    return mixed / mixed.sum(dim=-1, keepdim=True).clamp_min(EPS)


def fixmatch_loss(blended_probs: torch.Tensor, strong_probs: torch.Tensor, tau: float) -> torch.Tensor:
    """Masked consistency loss on the strong view.

    Samples whose blended pseudo-label peaks at or above ``tau`` pay the
    cross-entropy between the one-hot argmax pseudo-label and the strong
    prediction; the rest contribute zero. Returns the batch mean.
    """
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must be in (0, 1), got {tau}")
    conf, pseudo = blended_probs.max(dim=-1)
    mask = (conf >= tau).to(strong_probs.dtype)
    picked = strong_probs.gather(1, pseudo.unsqueeze(1)).squeeze(1)
    return (mask * -torch.log(picked.clamp_min(EPS))).mean()


def align_loss(semantic_probs: torch.Tensor, target: torch.Tensor | None = None) -> torch.Tensor:
    """Cross-entropy between a target distribution and the batch-mean semantic label.

    Defaults to a uniform target over classes, discouraging the semantic
    pseudo-labeler from collapsing onto a few classes. Minimum value is
    the target's entropy (ln K for uniform).
    """
    mean_probs = semantic_probs.mean(dim=0)
    if target is None:
        target = torch.full_like(mean_probs, 1.0 / mean_probs.shape[-1])
    return -(target * torch.log(mean_probs.clamp_min(EPS))).sum()


@dataclasses.dataclass
class PseudoLabelBundle:
    """Per-batch pseudo-label distributions and the confidence mask."""

    linear_probs: torch.Tensor    # [B, K]
    semantic_probs: torch.Tensor  # [B, K]
    blended_probs: torch.Tensor   # [B, K]
    confident: torch.Tensor       # [B] bool, max(blended) >= tau
    pseudo_class: torch.Tensor    # [B] long, argmax(blended)


@torch.no_grad()
def make_pseudo_labels(
    weak_features: torch.Tensor,
    classifier: torch.nn.Module,
    prototypes: Prototypes,
    histogram: ConfidentHistogram,
    tau: float,
    proto_temperature: float,
) -> PseudoLabelBundle:
    """Full pseudo-labeling pass for one unlabeled batch (no gradients)."""
    linear = linear_pseudo_label(weak_features, classifier)
    cold = not bool(prototypes.defined.all())
    semantic = semantic_pseudo_label(weak_features, prototypes, proto_temperature)
    blended = blend(linear, semantic, histogram.blend_weights(), cold=cold)
    conf, pseudo = blended.max(dim=-1)
    return PseudoLabelBundle(
        linear_probs=linear,
        semantic_probs=semantic,
        blended_probs=blended,
        confident=conf >= tau,
        pseudo_class=pseudo,
    )
